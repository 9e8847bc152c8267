from uridet.trainer.augment import augment, flip_image, resize_with_boxes
from uridet.trainer.losses import LossResult, multitask_loss, smooth_l1
from uridet.trainer.optim import DivergenceError, SgdOptimizer, TrainConfig, learning_rate_at
from uridet.trainer.log import TrainLog
from uridet.trainer.loops import train_frcnn, train_ssd

__all__ = [
    "augment",
    "flip_image",
    "resize_with_boxes",
    "LossResult",
    "multitask_loss",
    "smooth_l1",
    "DivergenceError",
    "SgdOptimizer",
    "TrainConfig",
    "learning_rate_at",
    "TrainLog",
    "train_frcnn",
    "train_ssd",
]
