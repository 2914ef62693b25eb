"""COCO-style detection metrics: IoU, 101-point AP, mAP@[.50:.95], AP50 and mAR."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels, worker_count
from .errors import InvalidInputError, UndefinedClassError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class GroundTruthBox:
    box: tuple
    class_index: int

    def __post_init__(self):
        _check_box(self.box)


@dataclass
class EvalReport:
    map: float
    ap50: float
    mar: float
    per_class_ap: dict
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "map": self.map,
            "ap50": self.ap50,
            "mar": self.mar,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


def _check_box(box):
    if len(box) != 4:
        raise InvalidInputError(f"box must have 4 coordinates, got {box!r}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(np.isfinite([x1, y1, x2, y2])):
        raise InvalidInputError(f"box has non-finite coordinates: {box!r}")
    if not (x1 < x2 and y1 < y2):
        raise InvalidInputError(f"degenerate box {box!r}: need x1 < x2 and y1 < y2")
    return x1, y1, x2, y2


def iou(a, b):
    """Intersection over union of two ``[x1, y1, x2, y2]`` boxes."""
    ax1, ay1, ax2, ay2 = _check_box(a)
    bx1, by1, bx2, by2 = _check_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU, (len(a), len(b)), matching :func:`iou` entry for entry."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / union, 0.0)


def average_precision(ranked, n_gt):
    """101-point interpolated AP of a ranked list of ``(confidence, is_tp)``.

    ``ranked`` must already be in rank order. Precision at each recall level
    r in {0, 0.01, ..., 1} is the best precision achieved at recall >= r, or 0
    when r is never reached.
    """
    if n_gt < 1:
        raise UndefinedClassError("average precision is undefined without ground truth")
    if len(ranked) == 0:
        return 0.0
    tp = np.array([bool(t) for _, t in ranked], dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    reached = idx < len(recall)
    sampled = np.where(reached, envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.sum() / len(RECALL_GRID))


def _det_fields(det):
    if isinstance(det, dict):
        return det["box"], int(det["class"]), float(det["confidence"])
    return det.box, int(det.class_index), float(det.confidence)


def _gt_fields(gt):
    if isinstance(gt, dict):
        return gt["box"], int(gt["class"])
    return gt.box, int(gt.class_index)


def _match_image(dets, gts, classes, thresholds, max_dets):
    """Per-class, per-threshold TP flags for one image's detections.

    Returns ``{class: (confidences, det_ids, tp[T, n], n_gt)}``.
    """
    out = {}
    for cls in classes:
        cand = [(c, i, b) for i, (b, k, c) in enumerate(dets) if k == cls]
        # rank by confidence, ties by original detection index
        cand.sort(key=lambda t: (-t[0], t[1]))
        cand = cand[:max_dets]
        gt_boxes = [b for b, k in gts if k == cls]
        conf = np.array([c for c, _, _ in cand], dtype=np.float64)
        ids = np.array([i for _, i, _ in cand], dtype=np.int64)
        if cand and gt_boxes:
            ious = iou_matrix([b for _, _, b in cand], gt_boxes)
            tp = kernels.greedy_match(ious, thresholds) >= 0
        else:
            tp = np.zeros((len(thresholds), len(cand)), dtype=bool)
        out[cls] = (conf, ids, tp, len(gt_boxes))
    return out


def evaluate(detections, ground_truths, max_dets=100, class_agnostic=False, thresholds=IOU_THRESHOLDS):
    """Score detections against ground truth.

    ``detections`` and ``ground_truths`` map image ids to lists of detections
    (``Detection`` objects or ``{box, class, confidence}`` dicts) and ground
    truths (``GroundTruthBox`` or ``{box, class}``). Images present only in
    ``ground_truths`` count as having no detections. Classes with no ground
    truth are left out of every mean.
    """
    unknown = sorted(set(detections) - set(ground_truths), key=str)
    if unknown:
        raise InvalidInputError(f"detections reference unknown image ids: {unknown}")
    if max_dets < 1:
        raise InvalidInputError("max_dets must be positive")
    image_ids = sorted(ground_truths, key=str)
    thresholds = np.asarray(thresholds, dtype=np.float64)

    per_image = []
    for img in image_ids:
        dets = []
        for det in detections.get(img, ()):
            box, cls, conf = _det_fields(det)
            _check_box(box)
            dets.append((tuple(box), 0 if class_agnostic else cls, conf))
        gts = []
        for gt in ground_truths[img]:
            box, cls = _gt_fields(gt)
            _check_box(box)
            gts.append((tuple(box), 0 if class_agnostic else cls))
        per_image.append((dets, gts))
    classes = sorted({k for _, gts in per_image for _, k in gts})

    def work(item):
        return _match_image(item[0], item[1], classes, thresholds, max_dets)

    workers = min(worker_count(), len(per_image)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            matched = list(pool.map(work, per_image))
    else:
        matched = [work(item) for item in per_image]

    ap = np.zeros((len(classes), len(thresholds)))
    recall = np.zeros_like(ap)
    for c_idx, cls in enumerate(classes):
        confs, img_ord, det_ids, tps = [], [], [], []
        n_gt = 0
        for i_idx, result in enumerate(matched):
            conf, ids, tp, n = result[cls]
            confs.append(conf)
            det_ids.append(ids)
            img_ord.append(np.full(len(conf), i_idx))
            tps.append(tp)
            n_gt += n
        conf = np.concatenate(confs)
        # rank by confidence; ties by image order then detection index
        order = np.lexsort((np.concatenate(det_ids), np.concatenate(img_ord), -conf))
        tp_all = np.concatenate(tps, axis=1)[:, order]
        for t_idx in range(len(thresholds)):
            flags = tp_all[t_idx]
            ap[c_idx, t_idx] = average_precision(list(zip(conf[order], flags)), n_gt)
            recall[c_idx, t_idx] = flags.sum() / n_gt

    config = {
        "iou_thresholds": [float(t) for t in thresholds],
        "max_dets": int(max_dets),
        "class_agnostic": bool(class_agnostic),
    }
    if not classes:
        return EvalReport(0.0, 0.0, 0.0, {}, config)
    t50 = int(np.argmin(np.abs(thresholds - 0.5)))
    return EvalReport(
        map=float(ap.mean(axis=1).mean()),
        ap50=float(ap[:, t50].mean()),
        mar=float(recall.mean(axis=1).mean()),
        per_class_ap={int(cls): float(ap[c].mean()) for c, cls in enumerate(classes)},
        config=config,
    )
