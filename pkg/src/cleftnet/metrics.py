"""Voxel-wise evaluation: confusion counts, F1, AUC, and distance scores.

The distance score averages two directed mean surface distances: from every
predicted voxel to the nearest ground-truth voxel (sensitive to false
positives) and from every ground-truth voxel to the nearest predicted voxel
(sensitive to false negatives).  Distances honor anisotropic voxel spacing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError, ShapeError
from .labels import euclidean_distance_transform

REPORT_FIELDS = ("TP", "FP", "FN", "TN", "precision", "recall", "F1", "AUC",
                 "ADGT", "ADF", "CREMI-score")


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    """Threshold a score field into a boolean mask (score >= threshold)."""
    return np.asarray(scores) >= threshold


def confusion_counts(pred_mask, gt_mask) -> tuple[int, int, int, int]:
    p = np.asarray(pred_mask) != 0
    g = np.asarray(gt_mask) != 0
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def f1_score(pred_mask, gt_mask) -> tuple[float, float, float]:
    """(precision, recall, F1); empty denominators evaluate to 0 by convention."""
    tp, fp, fn, _ = confusion_counts(pred_mask, gt_mask)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_auc(scores, gt_mask) -> float:
    """Area under the ROC curve by the rank statistic; ties contribute 1/2.

    Equivalent to enumerating all positive-negative pairs, so it is exact and
    invariant under strictly monotone transforms of the scores.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(gt_mask).ravel() != 0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC undefined: ground truth has a single class")
    uniq, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = (ends - counts + 1 + ends) / 2.0
    rank_sum = avg_rank[inv][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class CremiResult:
    adgt: float
    adf: float
    score: float
    degenerate: bool = False


def volume_diagonal(shape, spacing) -> float:
    """Physical length of the volume diagonal; the one-sided-empty penalty."""
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def cremi_score(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0),
                penalty: float | None = None) -> CremiResult:
    """Directed mean distances between masks and their average.

    Both masks empty scores 0 by convention.  Exactly one empty mask has no
    defined distances; both directed terms then take the penalty distance
    (default: the volume diagonal in physical units) and the result is
    flagged degenerate.
    """
    p = np.asarray(pred_mask) != 0
    g = np.asarray(gt_mask) != 0
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    has_p, has_g = bool(p.any()), bool(g.any())
    if not has_p and not has_g:
        return CremiResult(0.0, 0.0, 0.0)
    if has_p != has_g:
        pen = penalty if penalty is not None else volume_diagonal(p.shape, spacing)
        return CremiResult(pen, pen, pen, degenerate=True)
    dist_to_gt = euclidean_distance_transform(g, spacing)
    dist_to_pred = euclidean_distance_transform(p, spacing)
    adgt = float(dist_to_gt[p].mean())
    adf = float(dist_to_pred[g].mean())
    return CremiResult(adgt, adf, (adgt + adf) / 2.0)


@dataclass
class MetricReport:
    """All evaluation numbers for one prediction / ground-truth pair."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    auc: float  # NaN when the ground truth is single-class
    adgt: float
    adf: float
    cremi: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        vals = (self.tp, self.fp, self.fn, self.tn, self.precision, self.recall,
                self.f1, self.auc, self.adgt, self.adf, self.cremi)
        out = dict(zip(REPORT_FIELDS, vals))
        out["degenerate"] = self.degenerate
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, float):
                lines.append(f"{key}: {value:.9g}")
            else:
                lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        out = self.as_dict()
        if isinstance(out["AUC"], float) and np.isnan(out["AUC"]):
            out["AUC"] = None
        return json.dumps(out, indent=2) + "\n"


def evaluate(scores, gt_mask, spacing=(1.0, 1.0, 1.0), threshold: float = 0.5,
             penalty: float | None = None) -> MetricReport:
    """Full report: threshold the scores, then count, rank, and measure."""
    pred = binarize(scores, threshold)
    tp, fp, fn, tn = confusion_counts(pred, gt_mask)
    precision, recall, f1 = f1_score(pred, gt_mask)
    try:
        auc = roc_auc(scores, gt_mask)
    except MetricUndefinedError:
        auc = float("nan")
    cr = cremi_score(pred, gt_mask, spacing, penalty)
    return MetricReport(tp, fp, fn, tn, precision, recall, f1, auc,
                        cr.adgt, cr.adf, cr.score, cr.degenerate)
