"""Training-target assignment and example selection.

Covers anchor labeling for the proposal head, ROI labeling for the region
head, default-box matching with hard-negative mining for the single-shot
family, and hard-example selection that keeps only diverse, high-loss ROIs.
Everything is deterministic given inputs, config, and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uridet import boxcore

LABEL_IGNORE = -1
LABEL_BG = 0


@dataclass(frozen=True)
class AssignmentConfig:
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    roi_bg_lo: float = 0.1
    roi_bg_hi: float = 0.5
    rpn_batch: int = 256
    rpn_fg_fraction: float = 0.5
    roi_batch: int = 128
    roi_fg_fraction: float = 0.25
    ssd_match_iou: float = 0.5
    ssd_neg_pos_ratio: int = 3
    ssd_neg_floor: int = 8

    def __post_init__(self):
        for name in ("rpn_pos_iou", "rpn_neg_iou", "roi_fg_iou", "ssd_match_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.rpn_neg_iou >= self.rpn_pos_iou:
            raise ValueError("rpn_neg_iou must be below rpn_pos_iou")
        if self.roi_bg_hi > self.roi_fg_iou:
            raise ValueError("roi background range must end at or below roi_fg_iou")
        if min(self.rpn_batch, self.roi_batch) < 1:
            raise ValueError("batch sizes must be positive")


@dataclass(frozen=True)
class OhemConfig:
    batch_size: int = 64
    dedup_iou: float = 0.7

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.dedup_iou < 1.0:
            raise ValueError(f"dedup_iou must lie in (0, 1), got {self.dedup_iou}")


def assign_rpn_targets(anchors, gts, cfg: AssignmentConfig, image_size=None):
    """Label every anchor fg/bg/ignore and give fg anchors their delta target.

    An anchor is foreground when its best IoU reaches ``rpn_pos_iou`` or when
    it is the highest-IoU anchor for some ground truth (so every overlapped
    gt keeps at least one positive); background below ``rpn_neg_iou``;
    everything else, plus anchors crossing the image boundary, is ignored.

    Returns ``(labels, deltas)``: labels 1/0/-1 per anchor, deltas ``(N, 4)``
    filled for foreground rows.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, LABEL_BG, dtype=np.int64)
    deltas = np.zeros((n, 4))
    inside = np.ones(n, dtype=bool)
    if image_size is not None:
        w, h = image_size
        inside = (
            (anchors[:, 0] >= 0.0)
            & (anchors[:, 1] >= 0.0)
            & (anchors[:, 2] <= w)
            & (anchors[:, 3] <= h)
        )
        labels[~inside] = LABEL_IGNORE
    if len(gts) == 0:
        return labels, deltas

    gt_boxes = np.stack([g.box for g in gts])
    ious = boxcore.iou_matrix(anchors, gt_boxes)
    ious[~inside] = -1.0  # boundary anchors never match
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]

    fg = inside & (best_iou >= cfg.rpn_pos_iou)
    ignore = inside & (best_iou >= cfg.rpn_neg_iou) & ~fg
    labels[ignore] = LABEL_IGNORE
    # argmax rule: the best anchor for each gt is fg regardless of threshold
    gt_best = ious.max(axis=0)
    for j in range(len(gts)):
        if gt_best[j] > 0.0:
            match = ious[:, j] == gt_best[j]
            fg |= match
    labels[fg] = 1
    fg_idx = np.flatnonzero(fg)
    if len(fg_idx):
        deltas[fg_idx] = boxcore.encode(gt_boxes[best_gt[fg_idx]], anchors[fg_idx])
    return labels, deltas


def assign_roi_targets(rois, gts, cfg: AssignmentConfig):
    """Label ROIs with a class id, background, or ignore, plus fg deltas.

    Foreground ROIs (best IoU >= ``roi_fg_iou``) target their best gt's class
    and box; IoU in ``[roi_bg_lo, roi_bg_hi)`` is background; the rest are
    ignored.

    Returns ``(labels, deltas)``: labels are gt class ids, 0 for background,
    -1 for ignored.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    n = len(rois)
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if n == 0:
        return labels, deltas
    if len(gts) == 0:
        labels[:] = LABEL_BG
        return labels, deltas
    gt_boxes = np.stack([g.box for g in gts])
    gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
    ious = boxcore.iou_matrix(rois, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]
    fg = best_iou >= cfg.roi_fg_iou
    bg = (best_iou >= cfg.roi_bg_lo) & (best_iou < cfg.roi_bg_hi)
    labels[bg] = LABEL_BG
    labels[fg] = gt_cls[best_gt[fg]]
    fg_idx = np.flatnonzero(fg)
    if len(fg_idx):
        deltas[fg_idx] = boxcore.encode(gt_boxes[best_gt[fg_idx]], rois[fg_idx])
    return labels, deltas


def sample_minibatch(labels, batch, fg_fraction, rng):
    """Sample up to ``fg_fraction * batch`` fg and fill the rest with bg.

    Shortage on either side backfills from the other; ignored labels are never
    selected. Returns sorted indices, deterministic given the rng state.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    labels = np.asarray(labels)
    fg_idx = np.flatnonzero(labels > 0)
    bg_idx = np.flatnonzero(labels == LABEL_BG)
    want_fg = int(round(fg_fraction * batch))
    n_fg = min(want_fg, len(fg_idx))
    n_bg = min(batch - n_fg, len(bg_idx))
    n_fg = min(batch - n_bg, len(fg_idx))  # backfill fg if bg ran short
    take = []
    if n_fg:
        take.append(rng.choice(fg_idx, size=n_fg, replace=False))
    if n_bg:
        take.append(rng.choice(bg_idx, size=n_bg, replace=False))
    if not take:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(take).astype(np.int64))


def ohem_select(roi_losses, roi_boxes, cfg: OhemConfig):
    """Keep the ``batch_size`` highest-loss ROIs, skipping co-located ones.

    ROIs are visited by descending loss (ties by ascending index); a ROI is
    dropped when it overlaps an already-kept ROI at IoU >= ``dedup_iou``, so
    the kept set stays spatially diverse. Returns kept indices in visit order.
    """
    losses = np.asarray(roi_losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("ROI losses must be finite")
    boxes = np.asarray(roi_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-losses, kind="stable")
    keep = []
    for idx in order:
        if len(keep) == cfg.batch_size:
            break
        if keep and np.any(boxcore.iou_matrix(boxes[idx], boxes[keep])[0] >= cfg.dedup_iou):
            continue
        keep.append(int(idx))
    return np.asarray(keep, dtype=np.int64)


def match_ssd(default_boxes, gts, cfg: AssignmentConfig):
    """Match default boxes to ground truths.

    Two stages: first every gt claims one box by greedy bipartite matching
    (repeatedly take the highest-IoU still-free pair, ties by lowest box then
    gt index), so each overlapped gt keeps a match regardless of threshold;
    then every remaining box with IoU >= ``ssd_match_iou`` matches its best
    gt. Returns ``(match, deltas)`` where ``match[i]`` is a gt index or -1
    for background.
    """
    boxes = np.asarray(default_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    match = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if n == 0 or len(gts) == 0:
        return match, deltas
    gt_boxes = np.stack([g.box for g in gts])
    ious = boxcore.iou_matrix(boxes, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]
    thresh = best_iou >= cfg.ssd_match_iou
    match[thresh] = best_gt[thresh]
    # bipartite stage: each gt claims one distinct box, strongest pairs first
    work = ious.copy()
    for _ in range(len(gts)):
        flat = np.argmax(work)
        b, j = np.unravel_index(flat, work.shape)
        if work[b, j] <= 0.0:
            break
        match[b] = j
        work[b, :] = -1.0
        work[:, j] = -1.0
    pos = np.flatnonzero(match >= 0)
    if len(pos):
        deltas[pos] = boxcore.encode(gt_boxes[match[pos]], boxes[pos])
    return match, deltas


def hard_negative_mine(class_losses, matches, cfg: AssignmentConfig):
    """Pick the hardest background boxes at ``ssd_neg_pos_ratio`` per positive.

    With zero positives a floor of ``ssd_neg_floor`` hardest negatives keeps
    the loss defined. Ties break by ascending index.
    """
    losses = np.asarray(class_losses, dtype=np.float64)
    matches = np.asarray(matches)
    neg_idx = np.flatnonzero(matches < 0)
    n_pos = int(np.sum(matches >= 0))
    quota = cfg.ssd_neg_pos_ratio * n_pos if n_pos > 0 else cfg.ssd_neg_floor
    quota = min(quota, len(neg_idx))
    if quota == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-losses[neg_idx], kind="stable")
    return np.sort(neg_idx[order[:quota]])
