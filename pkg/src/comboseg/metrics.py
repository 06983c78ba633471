"""Overlap, error-rate and surface-distance metrics for hard masks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from .volume import OneHotMask

CSV_COLUMNS = ("case_id", "organ", "dice", "jaccard", "fpr_pos", "fpr_tn", "fnr", "hd_mm", "fg_fraction")
METRIC_KEYS = ("dice", "jaccard", "fpr_pos", "fpr_tn", "fnr", "hd_mm", "fg_fraction")


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined when either mask is empty."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def channel(self, c: int) -> "ConfusionCounts":
        return ConfusionCounts(*(np.asarray(getattr(self, k))[c] for k in ("tp", "fp", "fn", "tn")))

    def pooled(self) -> "ConfusionCounts":
        return ConfusionCounts(*(np.asarray(getattr(self, k)).sum() for k in ("tp", "fp", "fn", "tn")))


def _bits(m) -> np.ndarray:
    return np.asarray(m.bits if isinstance(m, OneHotMask) else m).astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Per-channel voxel counts; plain 3D arrays count as one channel."""
    p, g = _bits(pred), _bits(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if p.ndim == 3:
        p, g = p[..., None], g[..., None]
    axes = (0, 1, 2)
    return ConfusionCounts(
        tp=np.sum(p & g, axis=axes), fp=np.sum(p & ~g, axis=axes),
        fn=np.sum(~p & g, axis=axes), tn=np.sum(~p & ~g, axis=axes),
    )


def dice_score(cc: ConfusionCounts):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (cc.tp, cc.fp, cc.fn))
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den == 0, 1.0, 2 * tp / den)[()]


def jaccard(cc: ConfusionCounts):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (cc.tp, cc.fp, cc.fn))
    den = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den == 0, 1.0, tp / den)[()]


def fnr(cc: ConfusionCounts):
    """Miss rate ``fn / (fn + tp)``; 0 for an empty reference."""
    tp, fn = np.asarray(cc.tp, dtype=np.float64), np.asarray(cc.fn, dtype=np.float64)
    pos = tp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pos == 0, 0.0, fn / pos)[()]


def fpr(cc: ConfusionCounts):
    """False positives per reference-positive voxel, ``fp / (fn + tp)``.

    Can exceed 1.  With an empty reference it is 0 if nothing was predicted
    and NaN (undefined) otherwise.
    """
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (cc.tp, cc.fp, cc.fn))
    pos = tp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pos == 0, np.where(fp == 0, 0.0, np.nan), fp / pos)[()]


def fpr_tn(cc: ConfusionCounts):
    """Conventional ``fp / (fp + tn)``."""
    fp, tn = np.asarray(cc.fp, dtype=np.float64), np.asarray(cc.tn, dtype=np.float64)
    neg = fp + tn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(neg == 0, 0.0, fp / neg)[()]


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background voxel (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~binary_erosion(m, border_value=0)


def _points(mask, spacing) -> np.ndarray:
    return np.argwhere(boundary_voxels(mask)) * np.asarray(spacing, dtype=np.float64)


def directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """``max over a of min over b`` Euclidean distance between point sets."""
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.max(d))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance in mm between two 3D masks' boundaries."""
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise EmptyMaskError("Hausdorff distance undefined for an empty mask")
    a, b = _points(p, spacing), _points(g, spacing)
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def exclusive_labels(mask: OneHotMask, scores: np.ndarray) -> OneHotMask:
    """Keep, per voxel, only the set channel with the highest score."""
    bits = mask.bits.astype(bool)
    masked = np.where(bits, scores, -np.inf)
    best = masked.argmax(axis=3)
    out = np.zeros_like(mask.bits)
    any_set = bits.any(axis=3)
    idx = np.nonzero(any_set)
    out[idx + (best[idx],)] = 1
    return OneHotMask(out, mask.spacing)


def case_rows(case_id: str, pred: OneHotMask, gt: OneHotMask,
              organ_names: Optional[Sequence[str]] = None) -> List[Dict]:
    cc = confusion(pred, gt)
    n_vox = float(np.prod(gt.dims))
    rows = []
    for c in range(gt.channels):
        ch = cc.channel(c)
        try:
            hd = hausdorff(pred.bits[..., c], gt.bits[..., c], gt.spacing)
        except EmptyMaskError:
            hd = math.nan
        rows.append({
            "case_id": case_id,
            "organ": organ_names[c] if organ_names else f"organ{c}",
            "dice": float(dice_score(ch)),
            "jaccard": float(jaccard(ch)),
            "fpr_pos": float(fpr(ch)),
            "fpr_tn": float(fpr_tn(ch)),
            "fnr": float(fnr(ch)),
            "hd_mm": hd,
            "fg_fraction": 100.0 * float(gt.bits[..., c].sum()) / n_vox,
        })
    return rows


@dataclass
class OrganReport:
    """Per-(case, organ) rows plus per-organ mean and population std."""

    rows: List[Dict] = field(default_factory=list)
    mean: Dict[str, Dict[str, float]] = field(default_factory=dict)
    std: Dict[str, Dict[str, float]] = field(default_factory=dict)


def organ_report(cases: Iterable[Tuple[OneHotMask, OneHotMask]],
                 organ_names: Optional[Sequence[str]] = None,
                 case_ids: Optional[Sequence[str]] = None) -> OrganReport:
    """Aggregate metrics over cases; NaN entries (undefined HD or FPR) are skipped."""
    cases = list(cases)
    if not cases:
        raise ValueError("organ_report needs at least one case")
    rep = OrganReport()
    for i, (pred, gt) in enumerate(cases):
        cid = case_ids[i] if case_ids else f"case{i:03d}"
        rep.rows.extend(case_rows(cid, pred, gt, organ_names))
    organs = list(dict.fromkeys(r["organ"] for r in rep.rows))
    for organ in organs:
        sel = [r for r in rep.rows if r["organ"] == organ]
        rep.mean[organ], rep.std[organ] = {}, {}
        for k in METRIC_KEYS:
            vals = np.array([r[k] for r in sel], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            rep.mean[organ][k] = float(vals.mean()) if vals.size else math.nan
            rep.std[organ][k] = float(vals.std()) if vals.size else math.nan
    return rep


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_report_csv(path: Union[str, Path], report: OrganReport, header_lines: Sequence[str] = ()) -> None:
    """Rows use the fixed column set; missing values are empty cells."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# std: population; fpr_pos = fp/(tp+fn); fpr_tn = fp/(fp+tn); fg_fraction in percent\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
