"""Segmentation quality measures.

Two families live here.  The pixel-counting family (sensitivity,
specificity, F1, accuracy, Mcc, AUC) reduces to a confusion table inside an
optional evaluation mask.  The structural family scores connectivity (C),
dilation-tolerant area overlap (A) and skeleton-length consistency (L),
combined as F = C*A*L; it is deliberately tolerant to 1-2 pixel boundary
disagreements, which pixel counting punishes but clinicians do not.

Degenerate denominators never raise: the convention is value 0 (or NaN for
AUC and the structural family when ground truth is unusable) plus a flag
string in the report naming what went wrong.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError, IoError

EIGHT = np.ones((3, 3), dtype=bool)


def _as_mask(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        raise ContractError(f"{name} must be binary, found values {values[:8]}")
    return arr.astype(bool)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")


# -- confusion family ----------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred_mask, gt_mask, eval_mask=None) -> ConfusionCounts:
    """Exact pixel tallies of pred against gt inside the evaluation mask."""
    pred = _as_mask(pred_mask, "pred_mask")
    gt = _as_mask(gt_mask, "gt_mask")
    _same_shape(pred, gt)
    if eval_mask is None:
        keep = np.ones_like(gt)
    else:
        keep = _as_mask(eval_mask, "eval_mask")
        _same_shape(keep, gt)
    tp = int((pred & gt & keep).sum())
    tn = int((~pred & ~gt & keep).sum())
    fp = int((pred & ~gt & keep).sum())
    fn = int((~pred & gt & keep).sum())
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def basic_metrics(c: ConfusionCounts) -> tuple[float, float, float, float, float]:
    """(Se, Sp, F1, Acc, Mcc) with zero-denominator terms defined as 0."""
    se = _ratio(c.tp, c.tp + c.fn)
    sp = _ratio(c.tn, c.tn + c.fp)
    acc = _ratio(c.tp + c.tn, c.total)
    precision = _ratio(c.tp, c.tp + c.fp)
    f1 = _ratio(2 * precision * se, precision + se)
    mcc_den = math.sqrt(float(c.tp + c.fp) * float(c.tp + c.fn)
                        * float(c.tn + c.fp) * float(c.tn + c.fn))
    mcc = _ratio(float(c.tp) * c.tn - float(c.fp) * c.fn, mcc_den)
    return se, sp, f1, acc, mcc


def auc(prob_map, gt_mask, eval_mask=None) -> float:
    """Trapezoidal ROC area over every distinct threshold.

    Grouping by distinct score makes tied scores contribute trapezoids,
    which equals the rank statistic counting ties as one half; NaN when the
    ground truth holds a single class.
    """
    prob = np.asarray(prob_map, dtype=np.float64)
    gt = _as_mask(gt_mask, "gt_mask")
    _same_shape(prob, gt)
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ContractError(f"probabilities must lie in [0, 1], got range "
                            f"[{prob.min()}, {prob.max()}]")
    if eval_mask is not None:
        keep = _as_mask(eval_mask, "eval_mask")
        _same_shape(keep, gt)
        prob, gt = prob[keep], gt[keep]
    scores = prob.ravel()
    truth = gt.ravel()
    pos = int(truth.sum())
    neg = truth.size - pos
    if pos == 0 or neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    t = truth[order]
    tps = np.cumsum(t)
    fps = np.cumsum(~t)
    s = scores[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[last] / pos]
    fpr = np.r_[0.0, fps[last] / neg]
    return float(np.trapezoid(tpr, fpr))


# -- structural family ----------------------------------------------------------

def disk(radius: int) -> np.ndarray:
    """Boolean disk structuring element: x^2 + y^2 <= r^2."""
    if radius < 0:
        raise ContractError(f"radius must be non-negative, got {radius}")
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning to a 1-pixel-wide, connectivity-preserving core."""
    img = _as_mask(mask, "mask").copy()
    if img.ndim != 2:
        raise DimensionError(f"skeletonize expects a 2-D mask, got {img.shape}")

    def shifted(padded):
        # P2..P9, clockwise from north.
        return (padded[:-2, 1:-1], padded[:-2, 2:], padded[1:-1, 2:],
                padded[2:, 2:], padded[2:, 1:-1], padded[2:, :-2],
                padded[1:-1, :-2], padded[:-2, :-2])

    changed = True
    while changed:
        changed = False
        for phase in (0, 1):
            p = np.pad(img, 1, constant_values=False)
            ring = [s.astype(np.uint8) for s in shifted(p)]
            count = sum(ring)
            loop = ring + ring[:1]
            rises = sum((loop[i] == 0) & (loop[i + 1] == 1) for i in range(8))
            if phase == 0:
                east = ring[0] & ring[2] & ring[4]   # P2 P4 P6
                south = ring[2] & ring[4] & ring[6]  # P4 P6 P8
            else:
                east = ring[0] & ring[2] & ring[6]   # P2 P4 P8
                south = ring[0] & ring[4] & ring[6]  # P2 P6 P8
            kill = (img & (count >= 2) & (count <= 6) & (rises == 1)
                    & (east == 0) & (south == 0))
            if kill.any():
                img &= ~kill
                changed = True
    return img


def separate_thin(gt_mask) -> tuple[np.ndarray, np.ndarray]:
    """(thin, thick): thick survives a radius-2 opening, thin is the rest.

    The opening uses the radius-2 Chebyshev ball (a 5x5 square) rather than
    the Euclidean disk: a square element is exact on rectangular vessel
    cross sections, so solid shapes at least 5 pixels wide survive whole
    instead of losing their corners.
    """
    gt = _as_mask(gt_mask, "gt_mask")
    thick = ndimage.binary_opening(gt, structure=np.ones((5, 5), dtype=bool))
    thin = gt & ~thick
    return thin, thick


def cal_metrics(pred_mask, gt_mask) -> tuple[float, float, float, float]:
    """(C, A, L, F): connectivity, area and length consistency, F = C*A*L.

    C compares eight-connected component counts scaled by ground-truth size;
    A is the overlap of each mask with the other's radius-2 dilation over
    the plain union; L applies the same tolerant overlap to the skeletons.
    Empty ground truth has no meaningful score and yields NaN everywhere.
    """
    pred = _as_mask(pred_mask, "pred_mask")
    gt = _as_mask(gt_mask, "gt_mask")
    _same_shape(pred, gt)
    gt_pixels = int(gt.sum())
    if gt_pixels == 0:
        nan = float("nan")
        return nan, nan, nan, nan

    _, n_pred = ndimage.label(pred, structure=EIGHT)
    _, n_gt = ndimage.label(gt, structure=EIGHT)
    c = 1.0 - min(1.0, abs(n_pred - n_gt) / gt_pixels)

    grow = disk(2)
    pred_grown = ndimage.binary_dilation(pred, structure=grow)
    gt_grown = ndimage.binary_dilation(gt, structure=grow)
    union = int((pred | gt).sum())
    matched = int(((pred_grown & gt) | (pred & gt_grown)).sum())
    a = _ratio(matched, union)

    pred_skel = skeletonize(pred)
    gt_skel = skeletonize(gt)
    skel_union = int((pred_skel | gt_skel).sum())
    skel_matched = int(((ndimage.binary_dilation(pred_skel, structure=grow) & gt_skel)
                        | (pred_skel & ndimage.binary_dilation(gt_skel, structure=grow))).sum())
    length = _ratio(skel_matched, skel_union)

    return c, a, length, c * a * length


# -- reporting -------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    se: float
    sp: float
    f1: float
    acc: float
    auc: float
    mcc: float
    c: float
    a: float
    l: float
    f: float
    flags: tuple = ()

    def values(self) -> list[float]:
        return [self.se, self.sp, self.f1, self.acc, self.auc,
                self.mcc, self.c, self.a, self.l, self.f]


METRIC_COLUMNS = [f.name for f in fields(MetricReport)][:-1]

METRIC_LABELS = ["Se", "Sp", "F1", "Acc", "AUC", "Mcc", "Connectivity (C)",
                 "Overlapping Area (A)", "Consistency (L)", "F"]


def evaluate_pair(pred_mask, gt_mask, prob_map=None, eval_mask=None) -> MetricReport:
    """Full per-image report; missing probability map leaves AUC as NaN."""
    counts = confusion(pred_mask, gt_mask, eval_mask)
    se, sp, f1, acc, mcc = basic_metrics(counts)
    flags = []
    if counts.tp + counts.fn == 0:
        flags.append("se: no vessel pixels in ground truth")
    if counts.tn + counts.fp == 0:
        flags.append("sp: no background pixels in ground truth")
    if counts.tp + counts.fp == 0:
        flags.append("f1: empty prediction")
    if prob_map is None:
        area = float("nan")
        flags.append("auc: no probability map")
    else:
        area = auc(prob_map, gt_mask, eval_mask)
        if math.isnan(area):
            flags.append("auc: single-class ground truth")
    c, a, length, overall = cal_metrics(pred_mask, gt_mask)
    if math.isnan(overall):
        flags.append("cal: empty ground truth")
    return MetricReport(se, sp, f1, acc, area, mcc, c, a, length, overall,
                        tuple(flags))


def write_report(path, named_reports) -> None:
    """CSV with one row per image plus a NaN-aware mean row."""
    named_reports = list(named_reports)
    if not named_reports:
        raise ContractError("nothing to report")
    path = Path(path)
    table = np.array([report.values() for _, report in named_reports], dtype=np.float64)
    with warnings.catch_warnings():
        # an all-NaN column (say AUC without probability maps) means a NaN mean
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.nanmean(table, axis=0)
    try:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["image"] + METRIC_LABELS)
            for (name, report), row in zip(named_reports, table):
                writer.writerow([name] + [format(v, ".10g") for v in row])
            writer.writerow(["mean"] + [format(v, ".10g") for v in means])
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
