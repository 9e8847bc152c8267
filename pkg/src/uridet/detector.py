"""Complete detector models: shared backbone plus family-specific heads.

``FrcnnNet`` is the two-stage family (plain, multi-depth fusion, or
hard-example-mined — the latter two differ only in ROI feature pooling and
in the training loop). ``SsdNet`` is the single-shot family, optionally
trimmed. Both run one image at a time in float64 and expose ``params()``
for the optimizer/checkpoints and ``detect()`` for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uridet import boxcore, priors
from uridet.boxcore import Detection
from uridet.nets.backbone import Backbone, BackboneConfig
from uridet.nets.layers import collect_params, softmax
from uridet.nets.roi import MsFuse, RoiHead, RoiPoolOp
from uridet.nets.rpn import RpnHead, propose
from uridet.nets.ssd import AuxChain, GlobalMaxPool, MultiboxHead, SsdHeadConfig
from uridet.nets import ssd as ssdmod

FRCNN_VARIANTS = ("frcnn", "ms-frcnn", "ohem-frcnn")


@dataclass(frozen=True)
class ProposalConfig:
    nms_threshold: float = 0.7
    pre_nms_train: int = 1000
    post_nms_train: int = 64
    pre_nms_eval: int = 2000
    post_nms_eval: int = 600
    add_gt_to_rois: bool = True


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.05
    nms_threshold: float = 0.45
    max_detections: int = 100


class FrcnnNet:
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        anchor_spec: priors.AnchorSpec,
        num_classes: int = 7,
        variant: str = "frcnn",
        pool_hw=(4, 4),
        hidden: int = 64,
        proposal_cfg: ProposalConfig = ProposalConfig(),
        seed: int = 0,
    ):
        if variant not in FRCNN_VARIANTS:
            raise ValueError(f"variant must be one of {FRCNN_VARIANTS}, got {variant!r}")
        rng = np.random.default_rng(seed)
        self.variant = variant
        self.num_classes = num_classes
        self.anchor_spec = anchor_spec
        self.proposal_cfg = proposal_cfg
        self.pool_hw = tuple(pool_hw)
        self.backbone = Backbone(backbone_cfg, rng)
        taps = backbone_cfg.taps
        self.rpn_tap = taps[-1]
        head_channels = backbone_cfg.tap_channels()[self.rpn_tap]
        self.rpn = RpnHead(head_channels, anchor_spec.per_cell, rng)
        if variant == "ms-frcnn":
            if len(taps) < 3:
                raise ValueError("multi-depth fusion needs at least 3 backbone taps")
            self.fuse_taps = taps[-3:]
            fuse_channels = [backbone_cfg.tap_channels()[t] for t in self.fuse_taps]
            self.ms = MsFuse(fuse_channels, head_channels, *self.pool_hw, rng=rng)
            self.pool = None
        else:
            self.fuse_taps = None
            self.ms = None
            self.pool = RoiPoolOp(*self.pool_hw)
        self.roi_head = RoiHead(head_channels, *self.pool_hw, num_classes, hidden, rng=rng)
        self.channel_means = np.zeros(3)
        self._anchor_cache = {}

    def params(self):
        parts = [self.backbone, self.rpn, self.roi_head]
        if self.ms is not None:
            parts.append(self.ms)
        return collect_params(*parts)

    def preprocess(self, image):
        x = np.asarray(image, dtype=np.float64) / 255.0
        x = x - self.channel_means[None, None, :]
        return np.ascontiguousarray(x.transpose(2, 0, 1))

    def anchors_for(self, image_h, image_w):
        key = (image_h, image_w)
        if key not in self._anchor_cache:
            spec = self.backbone.feature_specs(image_h, image_w)[self.rpn_tap]
            self._anchor_cache[key] = priors.generate_anchors(spec, self.anchor_spec)
        return self._anchor_cache[key]

    def forward(self, x):
        """Backbone + proposal head; returns (taps, objectness, deltas)."""
        taps = self.backbone.forward(x)
        obj, deltas = self.rpn.forward(taps[self.rpn_tap])
        return taps, obj, deltas

    def pool_rois(self, taps, rois):
        if self.ms is not None:
            strides = self.backbone.config.tap_strides()
            return self.ms.forward(
                [taps[t] for t in self.fuse_taps], rois, [strides[t] for t in self.fuse_taps]
            )
        stride = self.backbone.config.tap_strides()[self.rpn_tap]
        return self.pool.forward(taps[self.rpn_tap], rois, stride)

    def classify_rois(self, taps, rois):
        return self.roi_head.forward(self.pool_rois(taps, rois))

    def backward(self, dobj, drpn_deltas, dcls_logits, droi_deltas):
        """Backprop both heads into the shared backbone in one pass."""
        tap_grads = {}
        if dcls_logits is not None:
            droifeat = self.roi_head.backward(dcls_logits, droi_deltas)
            if self.ms is not None:
                for tap, g in zip(self.fuse_taps, self.ms.backward(droifeat)):
                    tap_grads[tap] = tap_grads.get(tap, 0) + g
            else:
                tap_grads[self.rpn_tap] = self.pool.backward(droifeat)
        drpn_feat = self.rpn.backward(dobj, drpn_deltas)
        tap_grads[self.rpn_tap] = tap_grads.get(self.rpn_tap, 0) + drpn_feat
        self.backbone.backward(tap_grads)

    def propose_boxes(self, obj, deltas, image_w, image_h, train: bool):
        cfg = self.proposal_cfg
        pre = cfg.pre_nms_train if train else cfg.pre_nms_eval
        post = cfg.post_nms_train if train else cfg.post_nms_eval
        anchors = self.anchors_for(image_h, image_w)
        return propose(obj, deltas, anchors, pre, cfg.nms_threshold, post, (image_w, image_h))

    def detect(self, image, eval_cfg: EvalConfig = EvalConfig()):
        """Run the full two-stage pipeline on one uint8 image."""
        h, w = image.shape[:2]
        x = self.preprocess(image)
        taps, obj, deltas = self.forward(x)
        rois, _ = self.propose_boxes(obj, deltas, w, h, train=False)
        if len(rois) == 0:
            return []
        logits, roi_deltas = self.classify_rois(taps, rois)
        probs = softmax(logits)
        return _collect_detections(probs, roi_deltas, rois, w, h, self.num_classes, eval_cfg)


class SsdNet:
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        head_cfg: SsdHeadConfig,
        input_size: int = 96,
        s_min: float = 0.2,
        s_max: float = 0.9,
        num_classes: int = 7,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.head_cfg = head_cfg
        self.input_size = int(input_size)
        self.num_classes = num_classes
        self.backbone = Backbone(backbone_cfg, rng)
        for tap in head_cfg.base_taps:
            if tap not in backbone_cfg.taps:
                raise ValueError(f"head source {tap!r} is not a backbone tap")
        self.top_tap = head_cfg.base_taps[-1]
        backbone_specs = self.backbone.feature_specs(self.input_size, self.input_size)
        self.source_specs = ssdmod.source_specs(head_cfg, backbone_specs, self.input_size)
        self.aux = AuxChain(backbone_specs[self.top_tap].channels, head_cfg, rng)
        self.pool_src = GlobalMaxPool() if head_cfg.use_pool_source else None
        source_channels = {s.name: s.channels for s in self.source_specs}
        self.multibox = MultiboxHead(head_cfg, source_channels, num_classes, rng)
        self.box_spec = ssdmod.default_box_spec(
            head_cfg, backbone_specs, self.input_size, s_min, s_max
        )
        self.default_boxes = priors.generate_default_boxes(self.box_spec, self.input_size)
        self.channel_means = np.zeros(3)

    def params(self):
        return collect_params(self.backbone, self.aux, self.multibox)

    def preprocess(self, image):
        x = np.asarray(image, dtype=np.float64) / 255.0
        x = x - self.channel_means[None, None, :]
        return np.ascontiguousarray(x.transpose(2, 0, 1))

    def forward(self, x):
        """Predicts (logits, deltas) aligned with ``self.default_boxes``."""
        if x.shape[1] != self.input_size or x.shape[2] != self.input_size:
            raise ValueError(
                f"input must be {self.input_size}x{self.input_size}, got {x.shape[1:]}"
            )
        taps = self.backbone.forward(x)
        sources = {t: taps[t] for t in self.head_cfg.base_taps}
        aux_out = self.aux.forward(taps[self.top_tap])
        sources.update(aux_out)
        if self.pool_src is not None:
            top = aux_out[self.aux.names[-1]] if self.aux.names else taps[self.top_tap]
            sources["pool"] = self.pool_src.forward(top)
        logits, deltas = self.multibox.forward(sources)
        if len(logits) != len(self.default_boxes):
            raise ValueError(
                f"prediction/default-box misalignment: {len(logits)} vs "
                f"{len(self.default_boxes)}"
            )
        return logits, deltas

    def backward(self, dlogits, ddeltas):
        source_grads = self.multibox.backward(dlogits, ddeltas)
        aux_grads = {k: v for k, v in source_grads.items() if k in self.aux.names}
        if self.pool_src is not None and "pool" in source_grads:
            dpool = self.pool_src.backward(source_grads["pool"])
            if self.aux.names:
                last = self.aux.names[-1]
                aux_grads[last] = aux_grads.get(last, 0) + dpool
            else:
                source_grads[self.top_tap] = (
                    source_grads.get(self.top_tap, 0) + dpool
                )
        dtop = self.aux.backward(aux_grads)
        tap_grads = {
            t: source_grads[t] for t in self.head_cfg.base_taps if t in source_grads
        }
        if dtop is not None:
            tap_grads[self.top_tap] = tap_grads.get(self.top_tap, 0) + dtop
        self.backbone.backward(tap_grads)

    def detect(self, image, eval_cfg: EvalConfig = EvalConfig()):
        """Detect on one uint8 image of any size; boxes in original coords."""
        from uridet.trainer.augment import resize_with_boxes

        h, w = image.shape[:2]
        resized, _ = resize_with_boxes(image, np.zeros((0, 4)), self.input_size, self.input_size)
        logits, deltas = self.forward(self.preprocess(resized))
        probs = softmax(logits)
        dets = _collect_detections(
            probs,
            deltas,
            self.default_boxes,
            self.input_size,
            self.input_size,
            self.num_classes,
            eval_cfg,
            per_class_deltas=False,
        )
        sx = w / self.input_size
        sy = h / self.input_size
        out = []
        for d in dets:
            box = d.box * np.array([sx, sy, sx, sy])
            out.append(Detection(box=box, class_id=d.class_id, score=d.score))
        return out


def _collect_detections(
    probs, deltas, ref_boxes, image_w, image_h, num_classes, eval_cfg, per_class_deltas=True
):
    """Per-class decode + threshold + NMS + global top-k."""
    dets = []
    for c in range(1, num_classes + 1):
        scores = probs[:, c]
        keep = scores >= eval_cfg.score_threshold
        if not np.any(keep):
            continue
        d = deltas[keep, c - 1] if per_class_deltas else deltas[keep]
        boxes = boxcore.decode(d, np.asarray(ref_boxes)[keep], image_w, image_h)
        sc = scores[keep]
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, sc = boxes[ok], sc[ok]
        if len(boxes) == 0:
            continue
        kept = boxcore.nms_indices(boxes, sc, eval_cfg.nms_threshold)
        for i in kept:
            dets.append(Detection(box=boxes[i], class_id=c, score=float(sc[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[: eval_cfg.max_detections]
