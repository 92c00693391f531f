"""Segmentation quality metrics.

p-mIoU pools per-category point sets across the whole test set; s-mIoU
averages per-shape mean part IoUs; c-mIoU/i-mIoU are the flat
(single-level) category/instance means.  All metrics are reported on a
0..100 scale, and ground-truth UNLABELED points are excluded from both
intersection and union.
"""

from __future__ import annotations

import numpy as np

from mlcseg.core import UNLABELED
from mlcseg.errors import ShapeCountMismatch, UnknownCategory


def _check_shapes(predictions, ground_truth):
    if len(predictions) != len(ground_truth):
        raise ShapeCountMismatch(
            f"{len(predictions)} prediction shapes vs "
            f"{len(ground_truth)} ground-truth shapes"
        )
    pairs = []
    for idx, (pred, gt) in enumerate(zip(predictions, ground_truth)):
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ShapeCountMismatch(f"shape {idx}: point counts differ")
        keep = gt != UNLABELED
        pairs.append((pred[keep], gt[keep]))
    return pairs


def p_miou(predictions, ground_truth, n_labels: int) -> float:
    """Per-part-category IoU over pooled point sets, averaged over the
    categories that appear in ground truth or predictions."""
    pairs = _check_shapes(predictions, ground_truth)
    inter = np.zeros(n_labels)
    union = np.zeros(n_labels)
    for pred, gt in pairs:
        for c in range(n_labels):
            pc = pred == c
            gc = gt == c
            inter[c] += np.sum(pc & gc)
            union[c] += np.sum(pc | gc)
    present = union > 0
    if not np.any(present):
        return 100.0
    return float(np.mean(inter[present] / union[present]) * 100.0)


def s_miou(predictions, ground_truth, n_labels: int) -> float:
    """Per-shape mean part IoU, averaged over shapes.

    A category present in only one of a shape's ground truth/prediction
    contributes IoU 0 to that shape; categories absent from both are
    skipped (PartNet convention).
    """
    pairs = _check_shapes(predictions, ground_truth)
    per_shape = []
    for pred, gt in pairs:
        ious = []
        for c in range(n_labels):
            pc = pred == c
            gc = gt == c
            union = np.sum(pc | gc)
            if union == 0:
                continue
            ious.append(np.sum(pc & gc) / union)
        per_shape.append(np.mean(ious) if ious else 1.0)
    return float(np.mean(per_shape) * 100.0)


def _shape_miou(pred, gt, n_labels):
    ious = []
    for c in range(n_labels):
        pc = pred == c
        gc = gt == c
        union = np.sum(pc | gc)
        if union == 0:
            continue
        ious.append(np.sum(pc & gc) / union)
    return float(np.mean(ious)) if ious else 1.0


def flat_mious(predictions, ground_truth, shape_categories,
               n_labels: int, known_categories=None):
    """Flat-label metrics: (c_miou, i_miou).

    i-mIoU is the mean over shapes of the per-shape mean part IoU; c-mIoU
    averages the per-object-category means of those shape IoUs.
    """
    pairs = _check_shapes(predictions, ground_truth)
    if len(shape_categories) != len(pairs):
        raise ShapeCountMismatch("category list length does not match shapes")
    if known_categories is not None:
        for cat in shape_categories:
            if cat not in known_categories:
                raise UnknownCategory(f"unknown object category {cat!r}")
    shape_ious = [_shape_miou(pred, gt, n_labels) for pred, gt in pairs]
    i_miou = float(np.mean(shape_ious) * 100.0)
    by_cat = {}
    for cat, iou in zip(shape_categories, shape_ious):
        by_cat.setdefault(cat, []).append(iou)
    c_miou = float(np.mean([np.mean(v) for v in by_cat.values()]) * 100.0)
    return c_miou, i_miou


def format_report(per_level, flat=None) -> str:
    """Plain-text metrics report, one decimal per value.

    ``per_level`` is a list of (p_miou, s_miou) tuples ordered coarse to
    fine; ``flat`` an optional (c_miou, i_miou) pair.
    """
    lines = []
    for k, (p, s) in enumerate(per_level, start=1):
        lines.append(f"level {k} p-mIoU {p:.1f} s-mIoU {s:.1f}")
    if flat is not None:
        c, i = flat
        lines.append(f"c-mIoU {c:.1f} i-mIoU {i:.1f}")
    return "\n".join(lines) + "\n"
