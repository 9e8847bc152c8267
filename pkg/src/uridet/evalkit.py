"""VOC-style evaluation: per-class AP at IoU 0.5, PR and recall curves,
timed inference, and colored detection overlays.

Detections and ground truths are keyed by image id. Matching is greedy by
descending detection score (ties by insertion order): each detection claims
the highest-IoU unmatched gt of its class in its image when that IoU reaches
the threshold, otherwise it counts as a false positive. AP integrates the
precision envelope over all recall points (an 11-point variant is available
behind a flag); a class with zero ground truths has undefined AP and is
excluded from the mean with a warning.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from uridet import CLASS_IDS, ID_TO_NAME, NUM_CLASSES
from uridet import boxcore

# appendix palette; epithelial-nuclei color is our own pick (the reference
# scheme names only six)
OVERLAY_PALETTE = {
    CLASS_IDS["eryth"]: (255, 0, 0),
    CLASS_IDS["leuko"]: (0, 0, 0),
    CLASS_IDS["epith"]: (0, 200, 0),
    CLASS_IDS["cryst"]: (255, 0, 255),
    CLASS_IDS["cast"]: (0, 220, 220),
    CLASS_IDS["mycete"]: (235, 220, 0),
    CLASS_IDS["epithn"]: (40, 70, 255),
}


@dataclass
class RecallCurve:
    axis: str  # "proposal-count" | "iou-threshold"
    points: list  # of (x, recall)

    def recalls(self):
        return [r for _, r in self.points]


@dataclass
class EvalReport:
    per_class_ap: dict  # class id -> AP or None (undefined)
    mean_ap: float
    detection_count: int
    seconds_per_image: float
    pr_curves: dict  # class id -> list of (recall, precision)
    config_hash: str = ""
    dataset_id: str = ""

    def to_json_dict(self, include_timing=True):
        d = {
            "per_class_ap": {ID_TO_NAME[c]: ap for c, ap in self.per_class_ap.items()},
            "mean_ap": self.mean_ap,
            "detection_count": self.detection_count,
            "pr_curves": {
                ID_TO_NAME[c]: [[float(r), float(p)] for r, p in pts]
                for c, pts in self.pr_curves.items()
            },
            "config_hash": self.config_hash,
            "dataset_id": self.dataset_id,
        }
        if include_timing:
            d["seconds_per_image"] = self.seconds_per_image
        return d


def _ranked_class_detections(detections, class_id):
    """Flatten one class across images, by descending score then input order."""
    items = []
    for image_id in sorted(detections):
        for d in detections[image_id]:
            if d.class_id == class_id:
                items.append((image_id, d))
    items.sort(key=lambda t: -t[1].score)  # stable: ties keep input order
    return items


def _class_gts(gts, class_id):
    out = {}
    for image_id, glist in gts.items():
        boxes = [g.box for g in glist if g.class_id == class_id]
        if boxes:
            out[image_id] = np.stack(boxes)
    return out


def _match_flags(detections, gts, class_id, iou_threshold):
    """TP/FP flag per ranked detection of one class, plus total gt count."""
    ranked = _ranked_class_detections(detections, class_id)
    gt_boxes = _class_gts(gts, class_id)
    n_gts = sum(len(v) for v in gt_boxes.values())
    used = {img: np.zeros(len(v), dtype=bool) for img, v in gt_boxes.items()}
    tp = np.zeros(len(ranked), dtype=bool)
    for i, (image_id, det) in enumerate(ranked):
        boxes = gt_boxes.get(image_id)
        if boxes is None:
            continue
        ious = boxcore.iou_matrix(det.box, boxes)[0]
        ious[used[image_id]] = -1.0
        j = int(np.argmax(ious))  # ties resolve to the lowest gt index
        if ious[j] >= iou_threshold:
            tp[i] = True
            used[image_id][j] = True
    return tp, n_gts


def pr_curve(detections, gts, class_id, iou_threshold=0.5):
    """(recall, precision) after each ranked detection of ``class_id``."""
    tp, n_gts = _match_flags(detections, gts, class_id, iou_threshold)
    if n_gts == 0:
        return []
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gts
    precision = tps / np.maximum(tps + fps, 1)
    return list(zip(recall.tolist(), precision.tolist()))


def _envelope_area(recall, precision):
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return ap


def voc_ap(detections, gts, class_id, iou_threshold=0.5, use_11_point=False):
    """AP for one class; ``None`` (undefined) when the class has no gts."""
    tp, n_gts = _match_flags(detections, gts, class_id, iou_threshold)
    if n_gts == 0:
        warnings.warn(
            f"class {ID_TO_NAME.get(class_id, class_id)} has no ground truths; AP undefined"
        )
        return None
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gts
    precision = tps / np.maximum(tps + fps, 1)
    if use_11_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += (precision[mask].max() if np.any(mask) else 0.0) / 11.0
        return float(ap)
    return float(_envelope_area(recall, precision))


def mean_ap(detections, gts, class_ids=None, iou_threshold=0.5, use_11_point=False):
    """Mean of defined per-class APs; returns ``(mAP, {class: AP})``."""
    if class_ids is None:
        class_ids = range(1, NUM_CLASSES + 1)
    per_class = {}
    for c in class_ids:
        per_class[c] = voc_ap(detections, gts, c, iou_threshold, use_11_point)
    defined = [ap for ap in per_class.values() if ap is not None]
    m = float(np.mean(defined)) if defined else 0.0
    return m, per_class


def _greedy_match_ranks(proposals, gt_boxes, iou_threshold):
    """Rank (1-based) at which each gt is claimed by the greedy matcher."""
    ranks = np.full(len(gt_boxes), np.inf)
    if len(proposals) == 0 or len(gt_boxes) == 0:
        return ranks
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for k, box in enumerate(proposals):
        ious = boxcore.iou_matrix(box, gt_boxes)[0]
        ious[taken] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            taken[j] = True
            ranks[j] = k + 1
        if np.all(taken):
            break
    return ranks


def proposal_recall(proposals, gts, max_n, iou_threshold=0.5):
    """Recall of gts vs number of score-ranked proposals kept per image.

    ``proposals`` maps image id to an ``(N, 4)`` array already sorted by
    descending score.
    """
    all_ranks = []
    total = 0
    for image_id, glist in gts.items():
        boxes = [g.box for g in glist]
        total += len(boxes)
        if not boxes:
            continue
        ranks = _greedy_match_ranks(
            np.asarray(proposals.get(image_id, np.zeros((0, 4)))), np.stack(boxes), iou_threshold
        )
        all_ranks.append(ranks)
    ranks = np.concatenate(all_ranks) if all_ranks else np.zeros(0)
    points = []
    for n in range(1, max_n + 1):
        rec = float(np.sum(ranks <= n) / total) if total else 0.0
        points.append((n, rec))
    return RecallCurve(axis="proposal-count", points=points)


def recall_vs_iou(proposals, gts, fixed_n, thresholds):
    """Recall at each IoU threshold using the top ``fixed_n`` proposals."""
    points = []
    for t in thresholds:
        matched = 0
        total = 0
        for image_id, glist in gts.items():
            boxes = [g.box for g in glist]
            total += len(boxes)
            if not boxes:
                continue
            props = np.asarray(proposals.get(image_id, np.zeros((0, 4))))[:fixed_n]
            ranks = _greedy_match_ranks(props, np.stack(boxes), t)
            matched += int(np.sum(np.isfinite(ranks)))
        points.append((float(t), matched / total if total else 0.0))
    return RecallCurve(axis="iou-threshold", points=points)


def render_overlays(image, detections, score_threshold=0.7, palette=None):
    """Draw class-colored rectangles for detections above the threshold."""
    palette = palette if palette is not None else OVERLAY_PALETTE
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(canvas)
    for det in detections:
        if det.score < score_threshold:
            continue
        if det.class_id not in palette:
            raise ValueError(f"no overlay color for class id {det.class_id}")
        x0, y0, x1, y1 = det.box
        draw.rectangle([x0, y0, x1, y1], outline=palette[det.class_id], width=2)
    return np.asarray(canvas)


def timed_inference(model, images):
    """Mean model-only seconds per image; returns ``(detections list, mean)``."""
    out = []
    elapsed = 0.0
    for image in images:
        t0 = time.perf_counter()
        dets = model.detect(image)
        elapsed += time.perf_counter() - t0
        out.append(dets)
    return out, elapsed / max(len(images), 1)


def evaluate_detector(model, pairs, class_ids=None, iou_threshold=0.5):
    """Detect on (record, image) pairs and score against their annotations."""
    images = [image for _, image in pairs]
    det_lists, sec = timed_inference(model, images)
    detections = {r.image_id: d for (r, _), d in zip(pairs, det_lists)}
    gts = {r.image_id: r.target_objects() for r, _ in pairs}
    m, per_class = mean_ap(detections, gts, class_ids, iou_threshold)
    curves = {
        c: pr_curve(detections, gts, c, iou_threshold)
        for c, ap in per_class.items()
        if ap is not None
    }
    n_dets = sum(len(v) for v in detections.values())
    return EvalReport(
        per_class_ap=per_class,
        mean_ap=m,
        detection_count=n_dets,
        seconds_per_image=sec,
        pr_curves=curves,
    ), detections
