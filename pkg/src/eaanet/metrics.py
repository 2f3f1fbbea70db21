"""Overlap and distance metrics for binary segmentation masks.

Masks are 2-D ``(H, W)`` or 3-D ``(S, H, W)`` arrays of 0/1. Distances are
in voxel units with unit spacing on every axis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Distance metrics are undefined when either mask has no foreground."""


@dataclass
class MetricsReport:
    dsc: float
    hd: float
    hd95: float
    sensitivity: float
    specificity: float
    volume_similarity: float
    # False when either mask was empty, so hd/hd95 are NaN
    hd_defined: bool = True

    CSV_FIELDS = ("dsc", "hd", "hd95", "sensitivity", "specificity", "volume_similarity")

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim not in (2, 3):
        raise ValueError(f"mask must be 2-D or 3-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask is not binary")
        arr = arr.astype(bool)
    return arr


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion_counts(pred, gt) -> Tuple[int, int, int, int]:
    """Return ``(TP, FP, TN, FN)`` pixel counts."""
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, tn, fn


def _dsc(tp, fp, fn) -> float:
    denom = fp + 2 * tp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def _sens(tp, fn) -> float:
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def _spec(tn, fp) -> float:
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def _vs(n_gt, n_pred, standard: bool) -> float:
    total = n_gt + n_pred
    if total == 0:
        return 0.0
    if standard:
        return 2 * (n_gt - n_pred) / total
    return (2 * n_gt - n_pred) / total


def dsc(pred, gt) -> float:
    tp, fp, _, fn = confusion_counts(pred, gt)
    return _dsc(tp, fp, fn)


def sensitivity(pred, gt) -> float:
    tp, _, _, fn = confusion_counts(pred, gt)
    return _sens(tp, fn)


def specificity(pred, gt) -> float:
    _, fp, tn, _ = confusion_counts(pred, gt)
    return _spec(tn, fp)


def volume_similarity(pred, gt, standard: bool = False) -> float:
    """Volume agreement with ``M`` = ground truth and ``W`` = prediction.

    By default computes ``(2|M| - |W|) / (|M| + |W|)``. ``standard=True``
    gives the zero-centred ``2(|M| - |W|) / (|M| + |W|)`` instead.
    Both are 0.0 when both masks are empty.
    """
    p, g = _pair(pred, gt)
    return _vs(int(g.sum()), int(p.sum()), standard)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every point of ``src`` to its nearest point of ``dst``."""
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def _point_sets(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p, g = _pair(pred, gt)
    u, v = np.argwhere(g).astype(np.float64), np.argwhere(p).astype(np.float64)
    if len(u) == 0 or len(v) == 0:
        raise EmptyMaskError("Hausdorff distance is undefined for an empty mask")
    return u, v


def hausdorff(pred, gt) -> float:
    u, v = _point_sets(pred, gt)
    return float(max(_directed_distances(u, v).max(), _directed_distances(v, u).max()))


def hd95(pred, gt, q: float = 95.0) -> float:
    """``q``-th percentile (linear interpolation) of the pooled directed distances."""
    u, v = _point_sets(pred, gt)
    pooled = np.concatenate([_directed_distances(u, v), _directed_distances(v, u)])
    return float(np.percentile(pooled, q))


def evaluate_volume(pred_slices, gt_slices, standard_vs: bool = False) -> MetricsReport:
    """Metrics pooled over a whole volume; distances are measured in 3-D voxel space.

    A volume with an empty prediction or ground truth gets NaN distances and
    ``hd_defined=False`` instead of raising.
    """
    p = _as_mask(np.asarray(pred_slices))
    g = _as_mask(np.asarray(gt_slices))
    if p.ndim == 2:
        p, g = p[None], g[None]
    if p.shape != g.shape:
        raise ValueError(f"volume shapes differ: {p.shape} vs {g.shape}")
    tp, fp, tn, fn = confusion_counts(p, g)
    try:
        hd, h95, ok = hausdorff(p, g), hd95(p, g), True
    except EmptyMaskError:
        hd, h95, ok = math.nan, math.nan, False
    return MetricsReport(
        dsc=_dsc(tp, fp, fn),
        hd=hd,
        hd95=h95,
        sensitivity=_sens(tp, fn),
        specificity=_spec(tn, fp),
        volume_similarity=_vs(tp + fn, tp + fp, standard_vs),
        hd_defined=ok,
    )


def aggregate(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of each field; undefined distances are skipped."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    mean = {}
    for name in MetricsReport.CSV_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        finite = vals[~np.isnan(vals)]
        mean[name] = float(finite.mean()) if finite.size else math.nan
    return MetricsReport(**mean, hd_defined=all(r.hd_defined for r in reports))


def write_csv(path, reports: List[MetricsReport], ids: Optional[List[str]] = None) -> None:
    """One row per volume with header ``dsc,hd,hd95,sensitivity,specificity,volume_similarity``.

    When ``ids`` is given a leading ``volume`` column is added.
    """
    header = list(MetricsReport.CSV_FIELDS)
    if ids is not None:
        header = ["volume"] + header
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for i, r in enumerate(reports):
            row = r.row()
            if ids is not None:
                row = {"volume": ids[i], **row}
            writer.writerow(row)
