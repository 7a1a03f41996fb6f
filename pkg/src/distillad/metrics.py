"""Pixel/image AUROC and per-region-overlap, computed exactly.

The ROC estimator is the Mann-Whitney U statistic with ties counted as
one half, so it is invariant under any strictly increasing rescaling of
the scores. PRO sweeps thresholds over the pooled maps, averages
per-connected-region coverage, and integrates against the normal-pixel
false-positive rate up to a limit (default 0.3), normalized by that limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import (
    DegenerateGroundTruthError,
    DegenerateLabelsError,
    ShapeError,
)

PRO_FPR_LIMIT = 0.3
_MAX_EXACT_THRESHOLDS = 512

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalReport:
    """Per-category metric summary plus the per-image evidence."""

    category: str
    pixel_auroc: float
    image_auroc: float
    pro: float
    per_image_scores: list[tuple[str, float, int]] = field(default_factory=list)
    threshold_curve: list[tuple[float, float, float]] = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "category": self.category,
            "pixel_auroc": self.pixel_auroc,
            "image_auroc": self.image_auroc,
            "pro": self.pro,
            "per_image_scores": [
                {"path": p, "score": s, "label": l} for p, s, l in self.per_image_scores
            ],
            "threshold_curve": [
                {"threshold": t, "fpr": f, "mean_overlap": o} for t, f, o in self.threshold_curve
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2))


def roc_auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Area under the ROC curve via average ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores/labels lengths differ: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("both classes are required to compute AUROC")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC over the flattened concatenation of all test pixels."""
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    flat_scores = []
    flat_labels = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise ShapeError(f"map {amap.shape} vs mask {mask.shape}")
        flat_scores.append(amap.ravel())
        flat_labels.append(mask.ravel() > 0)
    return roc_auc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connectivity labeling with labels in raster-scan first-pixel order."""
    mask = np.asarray(mask) > 0
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return labels, 0
    # scipy already scans in raster order, but relabel explicitly so the
    # ordering contract does not depend on library internals.
    first_index = ndimage.minimum(
        np.arange(mask.size).reshape(mask.shape), labels, index=range(1, count + 1)
    )
    order = np.argsort(first_index, kind="stable")
    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[1 + order] = np.arange(1, count + 1)
    return remap[labels], count


def pro_curve(
    maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> list[tuple[float, float, float]]:
    """(threshold, fpr, mean region overlap) for a descending threshold sweep.

    Thresholds are every distinct score when there are at most 512 of
    them, otherwise 512 evenly spaced quantiles of the pooled scores.
    Detection at threshold ``t`` is ``score >= t``.
    """
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    region_scores: list[np.ndarray] = []
    normal_scores: list[np.ndarray] = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask) > 0
        if amap.shape != mask.shape:
            raise ShapeError(f"map {amap.shape} vs mask {mask.shape}")
        normal_scores.append(amap[~mask])
        labels, count = connected_components(mask)
        for region_id in range(1, count + 1):
            region_scores.append(np.sort(amap[labels == region_id]))
    if not region_scores:
        raise DegenerateGroundTruthError("no anomalous region in the ground truth")

    pooled = np.concatenate([np.concatenate(normal_scores)] + region_scores)
    distinct = np.unique(pooled)
    if distinct.size <= _MAX_EXACT_THRESHOLDS:
        thresholds = distinct[::-1]
    else:
        qs = np.linspace(0.0, 1.0, _MAX_EXACT_THRESHOLDS)
        thresholds = np.unique(np.quantile(pooled, qs))[::-1]

    normal = np.sort(np.concatenate(normal_scores))
    n_normal = normal.size
    # count of elements >= t via searchsorted on the ascending sort
    fpr = (n_normal - np.searchsorted(normal, thresholds, side="left")) / max(n_normal, 1)
    overlaps = np.zeros_like(thresholds)
    for scores in region_scores:
        covered = scores.size - np.searchsorted(scores, thresholds, side="left")
        overlaps += covered / scores.size
    overlaps /= len(region_scores)
    return [(float(t), float(f), float(o)) for t, f, o in zip(thresholds, fpr, overlaps)]


def pro_score(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = PRO_FPR_LIMIT,
    curve: Sequence[tuple[float, float, float]] | None = None,
) -> float:
    """Integrate mean region overlap against FPR up to the limit.

    Trapezoidal integration over the sweep, linearly interpolated at the
    cutoff, normalized by the limit.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if curve is None:
        curve = pro_curve(maps, masks)
    fprs = np.array([0.0] + [pt[1] for pt in curve])
    overlaps = np.array([0.0] + [pt[2] for pt in curve])

    area = 0.0
    for (f0, o0), (f1, o1) in zip(zip(fprs, overlaps), zip(fprs[1:], overlaps[1:])):
        if f1 <= f0:
            continue
        if f0 >= fpr_limit:
            break
        if f1 > fpr_limit:
            # cut the segment at the limit
            o1 = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0)
            f1 = fpr_limit
        area += 0.5 * (o0 + o1) * (f1 - f0)
    return area / fpr_limit
