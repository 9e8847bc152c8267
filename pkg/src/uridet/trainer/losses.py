"""Detection losses: cross-entropy plus smooth-L1 box regression.

The classification term handles both head styles: 2-D logits get a softmax
cross-entropy over background + classes, 1-D logits are treated as binary
(sigmoid) objectness. Regression is smooth L1 over foreground deltas only.
Each term is normalized by its own example count, and per-example losses are
kept around so hard-example selection can rank ROIs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uridet.nets.layers import sigmoid, softmax


def smooth_l1(diff):
    """Elementwise smooth L1 (beta 1) and its derivative."""
    diff = np.asarray(diff, dtype=np.float64)
    a = np.abs(diff)
    loss = np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    grad = np.clip(diff, -1.0, 1.0)
    return loss, grad


@dataclass
class LossResult:
    total: float
    cls_mean: float
    reg_mean: float
    cls_per_example: np.ndarray
    reg_per_example: np.ndarray
    dlogits: np.ndarray  # d(total)/d(cls_logits)
    ddeltas: np.ndarray  # d(total)/d(deltas)


def multitask_loss(cls_logits, cls_targets, deltas, delta_targets, lam=1.0) -> LossResult:
    """Classification + lambda * box-regression loss with gradients.

    ``deltas``/``delta_targets`` hold only the foreground rows, ``(M, 4)``;
    zero foreground makes the regression term 0. Returns means, per-example
    losses, and gradients of the total w.r.t. both inputs.
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    cls_targets = np.asarray(cls_targets)
    n = len(cls_logits)
    if n == 0:
        raise ValueError("classification loss needs at least one example")
    if cls_logits.ndim == 1:
        t = cls_targets.astype(np.float64)
        z = cls_logits
        cls_pe = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        dlogits = (sigmoid(z) - t) / n
    else:
        probs = softmax(cls_logits)
        idx = np.arange(n)
        zmax = cls_logits.max(axis=1)
        logsum = zmax + np.log(np.exp(cls_logits - zmax[:, None]).sum(axis=1))
        cls_pe = logsum - cls_logits[idx, cls_targets]
        dlogits = probs.copy()
        dlogits[idx, cls_targets] -= 1.0
        dlogits /= n

    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    delta_targets = np.asarray(delta_targets, dtype=np.float64).reshape(-1, 4)
    m = len(deltas)
    if m:
        reg_el, reg_grad = smooth_l1(deltas - delta_targets)
        reg_pe = reg_el.sum(axis=1)
        ddeltas = lam * reg_grad / m
        reg_mean = float(reg_pe.mean())
    else:
        reg_pe = np.zeros(0)
        ddeltas = np.zeros((0, 4))
        reg_mean = 0.0

    cls_mean = float(cls_pe.mean())
    return LossResult(
        total=cls_mean + lam * reg_mean,
        cls_mean=cls_mean,
        reg_mean=reg_mean,
        cls_per_example=cls_pe,
        reg_per_example=reg_pe,
        dlogits=dlogits,
        ddeltas=ddeltas,
    )
