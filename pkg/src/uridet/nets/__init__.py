from uridet.nets.backbone import Backbone, BackboneConfig
from uridet.nets.layers import Conv2d, Linear, Param
from uridet.nets.roi import MsFuse, RoiHead, roi_pool
from uridet.nets.rpn import RpnHead, propose
from uridet.nets.ssd import MultiboxHead, SsdHeadConfig, trim_ssd
from uridet.nets.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Backbone",
    "BackboneConfig",
    "Conv2d",
    "Linear",
    "Param",
    "MsFuse",
    "RoiHead",
    "roi_pool",
    "RpnHead",
    "propose",
    "MultiboxHead",
    "SsdHeadConfig",
    "trim_ssd",
    "load_checkpoint",
    "save_checkpoint",
]
