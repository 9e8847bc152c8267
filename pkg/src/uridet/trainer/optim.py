"""Momentum SGD with a stepped learning-rate schedule.

Weight decay enters as an additive L2 term on the gradient. The learning
rate is ``base_lr * lr_gamma ** k`` where ``k`` counts schedule steps the
iteration has reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss goes non-finite; carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    lr_gamma: float = 0.1
    lr_steps: tuple = (50_000,)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iters: int = 2_000
    images_per_step: int = 1
    loss_balance: float = 1.0
    hflip: bool = False
    vflip: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.lr_gamma < 1.0:
            raise ValueError("lr_gamma must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    k = sum(1 for s in cfg.lr_steps if iteration >= s)
    return cfg.base_lr * cfg.lr_gamma**k


class SgdOptimizer:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, iteration: int):
        lr = learning_rate_at(self.cfg, iteration)
        mu = self.cfg.momentum
        wd = self.cfg.weight_decay
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(
                    f"non-finite gradient in {name!r} at iteration {iteration}"
                )
            v = self.velocity[name]
            v *= mu
            v += p.grad + wd * p.value
            p.value -= lr * v
        return lr
