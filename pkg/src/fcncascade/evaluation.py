"""Detection matching and PR / ROC summaries.

Boxes are ``(x, y, w, h)`` with (x, y) the top-left corner.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0) * max(ih, 0)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0:1], a[:, 1:2]
    ax1, ay1 = ax0 + a[:, 2:3], ay0 + a[:, 3:4]
    bx0, by0 = b[:, 0], b[:, 1]
    bx1, by1 = bx0 + b[:, 2], by0 + b[:, 3]
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


@dataclass
class EvalRecord:
    confidence: float
    tp: bool
    image_id: str = ""
    gt_index: int | None = None
    box: tuple = (0, 0, 0, 0)


@dataclass
class CurveData:
    points: list[tuple[float, float]]
    summary: float
    thresholds: list[float]


def match_detections(dets, gts, iou_thresh: float = 0.5, image_id: str = "") -> list[EvalRecord]:
    """Greedy matching in descending confidence.

    ``dets`` is a sequence of ``(box, confidence)`` pairs (or objects with
    ``box`` and ``confidence`` attributes).  Each detection claims the
    unclaimed ground truth box of highest IoU if that IoU reaches the
    threshold.
    """
    pairs = [(tuple(d.box), float(d.confidence)) if hasattr(d, "box") else (tuple(d[0]), float(d[1]))
             for d in dets]
    order = sorted(range(len(pairs)), key=lambda i: (-pairs[i][1], pairs[i][0]))
    claimed = [False] * len(gts)
    overlaps = iou_matrix([p[0] for p in pairs], gts) if pairs and len(gts) else None
    records = []
    for i in order:
        box, conf = pairs[i]
        best = None
        if overlaps is not None:
            for g in range(len(gts)):
                if claimed[g] or overlaps[i, g] < iou_thresh:
                    continue
                if best is None or overlaps[i, g] > overlaps[i, best]:
                    best = g
        if best is not None:
            claimed[best] = True
        records.append(EvalRecord(conf, best is not None, image_id, best, box))
    return records


def _sorted(records):
    return sorted(records, key=lambda r: (-r.confidence, r.image_id, tuple(r.box)))


def _sweep(records):
    """Cumulative (threshold, tp, fp) after each distinct confidence value."""
    out = []
    tp = fp = 0
    recs = _sorted(records)
    for i, r in enumerate(recs):
        tp += r.tp
        fp += not r.tp
        if i + 1 == len(recs) or recs[i + 1].confidence != r.confidence:
            out.append((r.confidence, tp, fp))
    return out


def pr_curve(records, total_gt: int) -> CurveData:
    """Precision/recall points and all-points average precision.

    AP is accumulated in exact rational arithmetic over the integer counts
    and rounded once, so it does not depend on summation order.
    """
    if total_gt < 1:
        raise ValueError("total_gt must be >= 1")
    points, thresholds = [], []
    ap = Fraction(0)
    prev_tp = 0
    for thr, tp, fp in _sweep(records):
        ap += Fraction(tp - prev_tp, total_gt) * Fraction(tp, tp + fp)
        prev_tp = tp
        points.append((tp / total_gt, tp / (tp + fp)))
        thresholds.append(thr)
    return CurveData(points, float(ap), thresholds)


def roc_curve(records, n_images: int, total_gt: int | None = None, max_fp: int | None = None) -> CurveData:
    """Discrete ROC: x = false positive count, y = true positive rate.

    The AUC is the area under the TPR step function over [0, max_fp]
    divided by ``max_fp``; ``max_fp`` defaults to the total number of false
    positives (at least 1).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if total_gt is None:
        total_gt = sum(r.tp for r in records)
    sweep = _sweep(records)
    points = [(0.0, 0.0)]
    thresholds = [float("inf")]
    steps = [(0, 0)]  # (fp, tp) as integers
    for thr, tp, fp in sweep:
        points.append((float(fp), tp / total_gt if total_gt else 0.0))
        thresholds.append(thr)
        steps.append((fp, tp))
    total_fp = sweep[-1][2] if sweep else 0
    span = max_fp if max_fp is not None else max(total_fp, 1)
    if span < 1 or not total_gt:
        return CurveData(points, 0.0, thresholds)
    # TPR at an FP budget is the highest TPR reached with fp <= budget;
    # tp is nondecreasing along the sweep so the latest step applies.
    area = 0
    for (x0, tp0), (x1, _) in zip(steps, steps[1:] + [(span, 0)]):
        lo, hi = min(x0, span), min(x1, span)
        if hi > lo:
            area += (hi - lo) * tp0
    return CurveData(points, float(Fraction(area, span * total_gt)), thresholds)


def adapt_box_for_ellipse_eval(box, image_size=None, use_extended_height: bool = False):
    """Stretch a box vertically by 25% and lift its centre by 10% of the height.

    The lift uses the original height unless ``use_extended_height``.  When
    ``image_size = (width, height)`` is given the result is clamped to it.
    """
    x, y, w, h = box
    if h <= 0:
        return tuple(box)
    cy = y + h / 2.0
    new_h = 1.25 * h
    cy -= 0.10 * (new_h if use_extended_height else h)
    nx, ny = x, cy - new_h / 2.0
    if image_size is not None:
        iw, ih = image_size
        y0, y1 = max(ny, 0.0), min(ny + new_h, ih)
        x0, x1 = max(nx, 0.0), min(nx + w, iw)
        nx, ny, w, new_h = x0, y0, x1 - x0, y1 - y0
    return (_num(nx), _num(ny), _num(w), _num(new_h))


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


# ---------------------------------------------------------------- file formats

def read_detections(path) -> dict[str, list[tuple[tuple, float]]]:
    """Parse ``image_id x y w h confidence`` lines."""
    out: dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"malformed detection line: {line!r}")
        box = tuple(_num(float(v)) for v in parts[1:5])
        out.setdefault(parts[0], []).append((box, float(parts[5])))
    return out


def read_annotations(path) -> dict[str, list[tuple]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            doc = json.loads(line)
            out[str(doc["image"])] = [tuple(b) for b in doc["boxes"]]
    return out


def evaluate(dets: dict, anns: dict, iou_thresh: float = 0.5, fddb_adapt: bool = False):
    """Match every annotated image; returns (records, n_gt)."""
    records, n_gt = [], 0
    for image_id in sorted(anns):
        gts = anns[image_id]
        n_gt += len(gts)
        d = dets.get(image_id, [])
        if fddb_adapt:
            d = [(adapt_box_for_ellipse_eval(b), c) for b, c in d]
        records += match_detections(d, gts, iou_thresh, image_id)
    return records, n_gt


def write_curve_csv(curve: CurveData, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "x", "y"])
        for thr, (x, y) in zip(curve.thresholds, curve.points):
            writer.writerow([repr(float(thr)), repr(float(x)), repr(float(y))])


def summary_json(pr: CurveData, roc: CurveData, n_images: int, n_gt: int) -> str:
    return json.dumps({"ap": pr.summary, "auc": roc.summary, "n_images": n_images, "n_gt": n_gt},
                      indent=2)
