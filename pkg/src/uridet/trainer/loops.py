"""End-to-end training loops for both detector families.

Single-threaded, one image per numeric step (``images_per_step`` images
accumulate gradients before each update), fully determined by the config
seed. Both loops log per-iteration loss components and abort on divergence,
restoring the last finite snapshot.
"""

from __future__ import annotations

import time

import numpy as np

from uridet import boxcore, sampling
from uridet.nets.layers import zero_grads
from uridet.trainer.augment import augment, resize_with_boxes
from uridet.trainer.log import TrainLog
from uridet.trainer.losses import multitask_loss
from uridet.trainer.optim import DivergenceError, SgdOptimizer, TrainConfig


def channel_means(dataset):
    """Per-channel mean of images scaled to [0, 1]."""
    acc = np.zeros(3)
    for image, _ in dataset:
        acc += image.reshape(-1, 3).mean(axis=0) / 255.0
    return acc / max(len(dataset), 1)


def _gt_boxes(gts):
    if not gts:
        return np.zeros((0, 4))
    return np.stack([g.box for g in gts])


def _flip_gts(gts, boxes):
    return [boxcore.GroundTruth(box=b, class_id=g.class_id) for g, b in zip(gts, boxes)]


class _Snapshots:
    """Keeps the last finite parameter state for divergence recovery."""

    def __init__(self, params, every=25):
        self.params = params
        self.every = every
        self.state = {k: p.value.copy() for k, p in params.items()}
        self.iteration = -1

    def maybe_take(self, iteration):
        if iteration % self.every == 0:
            self.state = {k: p.value.copy() for k, p in self.params.items()}
            self.iteration = iteration

    def restore(self):
        for k, p in self.params.items():
            p.value[...] = self.state[k]


def _epoch_order(rng, n, iteration, cache):
    epoch = iteration // n
    if cache.get("epoch") != epoch:
        cache["epoch"] = epoch
        cache["order"] = rng.permutation(n)
    return cache["order"][iteration % n]


def train_frcnn(
    net,
    dataset,
    train_cfg: TrainConfig,
    assign_cfg: sampling.AssignmentConfig = sampling.AssignmentConfig(),
    ohem_cfg: sampling.OhemConfig | None = None,
    config_hash: str = "",
) -> TrainLog:
    """Approximate-joint training: proposal and region losses share one step.

    With ``ohem_cfg`` set (the hard-example variant), a read-only loss pass
    scores every candidate ROI and only the selected hard ones contribute
    gradients; otherwise ROIs are class-balanced random samples.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_cfg.seed)
    net.channel_means = channel_means(dataset)
    params = net.params()
    opt = SgdOptimizer(params, train_cfg)
    log = TrainLog(seed=train_cfg.seed, config_hash=config_hash)
    snaps = _Snapshots(params)
    flags = _flip_flags(train_cfg)
    order_cache = {}
    t0 = time.perf_counter()

    for it in range(train_cfg.max_iters):
        snaps.maybe_take(it)
        zero_grads(params)
        losses = {"rpn_cls": 0.0, "rpn_reg": 0.0, "roi_cls": 0.0, "roi_reg": 0.0}
        try:
            for _ in range(train_cfg.images_per_step):
                idx = _epoch_order(rng, len(dataset), it, order_cache)
                image, gts = dataset[idx]
                image, boxes = augment(image, _gt_boxes(gts), flags, rng)
                gts_t = _flip_gts(gts, boxes)
                step = _frcnn_step(net, image, gts_t, train_cfg, assign_cfg, ohem_cfg, rng)
                for k in losses:
                    losses[k] += step[k] / train_cfg.images_per_step
            total = sum(losses.values())
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            lr = opt.step(it)
        except DivergenceError:
            snaps.restore()
            log.aborted_at = it
            raise
        losses["total"] = total
        log.append(it, losses, lr, time.perf_counter() - t0)
    return log


def _flip_flags(cfg: TrainConfig):
    flags = set()
    if cfg.hflip:
        flags.add("horizontal")
    if cfg.vflip:
        flags.add("vertical")
    return flags


def _frcnn_step(net, image, gts, train_cfg, assign_cfg, ohem_cfg, rng):
    h, w = image.shape[:2]
    x = net.preprocess(image)
    taps, obj, rpn_deltas = net.forward(x)
    anchors = net.anchors_for(h, w)

    # proposal-head targets
    labels, target_deltas = sampling.assign_rpn_targets(anchors, gts, assign_cfg, (w, h))
    sel = sampling.sample_minibatch(labels, assign_cfg.rpn_batch, assign_cfg.rpn_fg_fraction, rng)
    fg_sel = sel[labels[sel] == 1]
    rpn_loss = multitask_loss(
        obj[sel],
        (labels[sel] == 1).astype(np.int64),
        rpn_deltas[fg_sel],
        target_deltas[fg_sel],
        lam=train_cfg.loss_balance,
    )
    dobj = np.zeros_like(obj)
    dobj[sel] = rpn_loss.dlogits
    drpn = np.zeros_like(rpn_deltas)
    drpn[fg_sel] = rpn_loss.ddeltas

    # region targets on proposals (plus gt boxes as extra candidates)
    rois, _ = net.propose_boxes(obj, rpn_deltas, w, h, train=True)
    if net.proposal_cfg.add_gt_to_rois and gts:
        rois = np.concatenate([rois, _gt_boxes(gts)], axis=0)
    roi_labels, roi_targets = sampling.assign_roi_targets(rois, gts, assign_cfg)

    if ohem_cfg is None:
        keep = sampling.sample_minibatch(
            roi_labels, assign_cfg.roi_batch, assign_cfg.roi_fg_fraction, rng
        )
    else:
        cand = np.flatnonzero(roi_labels != sampling.LABEL_IGNORE)
        if len(cand) == 0 and len(rois):
            cand = np.arange(len(rois))
            roi_labels = np.zeros(len(rois), dtype=np.int64)
        if len(cand) == 0:
            keep = cand
        else:
            # read-only pass: loss for every candidate ROI, gradients for none
            logits_all, deltas_all = net.classify_rois(taps, rois[cand])
            fg_rows = np.flatnonzero(roi_labels[cand] > 0)
            probe = multitask_loss(
                logits_all,
                roi_labels[cand],
                deltas_all[fg_rows, roi_labels[cand][fg_rows] - 1],
                roi_targets[cand][fg_rows],
                lam=train_cfg.loss_balance,
            )
            per_roi = probe.cls_per_example.copy()
            per_roi[fg_rows] += train_cfg.loss_balance * probe.reg_per_example
            hard = sampling.ohem_select(per_roi, rois[cand], ohem_cfg)
            keep = cand[hard]

    if len(keep) == 0:
        roi_loss = None
    else:
        logits, roi_deltas = net.classify_rois(taps, rois[keep])
        kept_labels = roi_labels[keep]
        fg_rows = np.flatnonzero(kept_labels > 0)
        roi_loss = multitask_loss(
            logits,
            kept_labels,
            roi_deltas[fg_rows, kept_labels[fg_rows] - 1],
            roi_targets[keep][fg_rows],
            lam=train_cfg.loss_balance,
        )
        dlogits = roi_loss.dlogits
        ddeltas = np.zeros_like(roi_deltas)
        ddeltas[fg_rows, kept_labels[fg_rows] - 1] = roi_loss.ddeltas

    net.backward(
        dobj,
        drpn,
        dlogits if roi_loss is not None else None,
        ddeltas if roi_loss is not None else None,
    )
    return {
        "rpn_cls": rpn_loss.cls_mean,
        "rpn_reg": rpn_loss.reg_mean,
        "roi_cls": roi_loss.cls_mean if roi_loss else 0.0,
        "roi_reg": roi_loss.reg_mean if roi_loss else 0.0,
    }


def train_ssd(
    net,
    dataset,
    train_cfg: TrainConfig,
    assign_cfg: sampling.AssignmentConfig = sampling.AssignmentConfig(),
    config_hash: str = "",
) -> TrainLog:
    """Single-shot training: matched boxes plus mined hard negatives."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_cfg.seed)
    net.channel_means = channel_means(dataset)
    params = net.params()
    opt = SgdOptimizer(params, train_cfg)
    log = TrainLog(seed=train_cfg.seed, config_hash=config_hash)
    snaps = _Snapshots(params)
    flags = _flip_flags(train_cfg)
    order_cache = {}
    t0 = time.perf_counter()

    for it in range(train_cfg.max_iters):
        snaps.maybe_take(it)
        zero_grads(params)
        losses = {"ssd_cls": 0.0, "ssd_reg": 0.0}
        try:
            for _ in range(train_cfg.images_per_step):
                idx = _epoch_order(rng, len(dataset), it, order_cache)
                image, gts = dataset[idx]
                image, boxes = augment(image, _gt_boxes(gts), flags, rng)
                image, boxes = resize_with_boxes(image, boxes, net.input_size, net.input_size)
                gts_t = _flip_gts(gts, boxes)
                step = _ssd_step(net, image, gts_t, train_cfg, assign_cfg)
                for k in losses:
                    losses[k] += step[k] / train_cfg.images_per_step
            total = sum(losses.values())
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            lr = opt.step(it)
        except DivergenceError:
            snaps.restore()
            log.aborted_at = it
            raise
        losses["total"] = total
        log.append(it, losses, lr, time.perf_counter() - t0)
    return log


def _ssd_step(net, image, gts, train_cfg, assign_cfg):
    x = net.preprocess(image)
    logits, deltas = net.forward(x)
    match, target_deltas = sampling.match_ssd(net.default_boxes, gts, assign_cfg)
    pos = np.flatnonzero(match >= 0)

    # background loss per box for mining: -log p(background)
    zmax = logits.max(axis=1)
    logsum = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    bg_loss = logsum - logits[:, 0]
    neg = sampling.hard_negative_mine(bg_loss, match, assign_cfg)

    sel = np.concatenate([pos, neg])
    targets = np.zeros(len(sel), dtype=np.int64)
    targets[: len(pos)] = [gts[j].class_id for j in match[pos]] if len(pos) else []
    loss = multitask_loss(
        logits[sel], targets, deltas[pos], target_deltas[pos], lam=train_cfg.loss_balance
    )
    dlogits = np.zeros_like(logits)
    dlogits[sel] = loss.dlogits
    ddeltas = np.zeros_like(deltas)
    ddeltas[pos] = loss.ddeltas
    net.backward(dlogits, ddeltas)
    return {"ssd_cls": loss.cls_mean, "ssd_reg": loss.reg_mean}
