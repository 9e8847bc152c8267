"""Region proposal head: per-anchor objectness and box deltas.

A 3x3 conv followed by two 1x1 sibling convs. Outputs are flattened to
align index-for-index with :func:`uridet.priors.generate_anchors` on the
same feature map (row-major cells, then anchor slot within the cell).
Objectness is a single logit per anchor, squashed by a sigmoid.
"""

from __future__ import annotations

import numpy as np

from uridet import boxcore
from uridet.nets.layers import Conv2d, collect_params, sigmoid


class RpnHead:
    def __init__(self, in_channels, anchors_per_cell, rng, mid_channels=None):
        mid = mid_channels if mid_channels is not None else in_channels
        self.a = anchors_per_cell
        self.conv = Conv2d("rpn.conv", in_channels, mid, rng=rng, relu=True)
        self.obj = Conv2d("rpn.obj", mid, anchors_per_cell, ksize=1, pad=0, rng=rng)
        self.reg = Conv2d("rpn.reg", mid, 4 * anchors_per_cell, ksize=1, pad=0, rng=rng)
        self._hw = None

    def params(self):
        return collect_params(self.conv, self.obj, self.reg)

    def forward(self, feat):
        """Returns (objectness logits ``(H*W*A,)``, deltas ``(H*W*A, 4)``)."""
        mid = self.conv.forward(feat)
        obj_map = self.obj.forward(mid)  # (A, H, W)
        reg_map = self.reg.forward(mid)  # (4A, H, W)
        _, h, w = obj_map.shape
        self._hw = (h, w)
        obj = obj_map.transpose(1, 2, 0).ravel()
        deltas = reg_map.reshape(self.a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
        return obj, deltas

    def backward(self, dobj, ddeltas):
        h, w = self._hw
        dobj_map = dobj.reshape(h, w, self.a).transpose(2, 0, 1)
        dreg_map = (
            ddeltas.reshape(h, w, self.a, 4).transpose(2, 3, 0, 1).reshape(4 * self.a, h, w)
        )
        dmid = self.obj.backward(np.ascontiguousarray(dobj_map))
        dmid = dmid + self.reg.backward(np.ascontiguousarray(dreg_map))
        return self.conv.backward(dmid)


def propose(
    objectness,
    deltas,
    anchors,
    pre_nms_top_n,
    nms_threshold,
    post_nms_top_n,
    image_size,
):
    """Turn per-anchor predictions into scored, NMS-filtered proposal boxes.

    Decode every anchor, clip to the image, drop degenerate boxes, keep the
    ``pre_nms_top_n`` highest-objectness survivors, apply class-agnostic NMS,
    and return up to ``post_nms_top_n`` boxes with their sigmoid scores.
    """
    image_w, image_h = image_size
    boxes = boxcore.decode(deltas, anchors, image_w, image_h)
    scores = sigmoid(np.asarray(objectness, dtype=np.float64))
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes = boxes[ok]
    scores = scores[ok]
    if len(boxes) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    order = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
    boxes = boxes[order]
    scores = scores[order]
    keep = boxcore.nms_indices(boxes, scores, nms_threshold)[:post_nms_top_n]
    return boxes[keep], scores[keep]
