"""Binary classification metrics, CSV exports and the disparity planarity probe.

Scores are probabilities of the positive class (real face = 1); a sample is
predicted positive when its score is >= the threshold.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


def _validate(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValueError("empty score set")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def _require_both(y: np.ndarray) -> None:
    if y.min() == y.max():
        raise ValueError("both classes must be present")


def auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _validate(scores, labels)
    _require_both(y)
    pos, neg = s[y == 1], np.sort(s[y == 0])
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))


def roc_points(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Step ROC over every distinct threshold, from (0, 0) to (1, 1)."""
    s, y = _validate(scores, labels)
    _require_both(y)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # keep only the last index of each run of equal scores
    last = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    return fpr, tpr


def eer(scores, labels) -> float:
    """Error rate where FPR and FNR cross on the step ROC, linearly interpolated."""
    fpr, tpr = roc_points(scores, labels)
    fnr = 1.0 - tpr
    gap = fnr - fpr  # starts at 1, ends at -1
    k = int(np.argmax(gap <= 0))
    g0, g1 = gap[k - 1], gap[k]
    t = g0 / (g0 - g1)
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def tpr_at_fpr(scores, labels, targets: Sequence[float]) -> List[float]:
    """Highest TPR over step-ROC operating points with FPR <= target."""
    fpr, tpr = roc_points(scores, labels)
    out = []
    for target in targets:
        ok = fpr <= target + 1e-12
        out.append(float(tpr[ok].max()))
    return out


def acc(scores, labels, threshold: float = 0.5) -> float:
    s, y = _validate(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def report(scores, labels, fpr_targets: Iterable[float], threshold: float = 0.5) -> Dict[str, object]:
    targets = list(fpr_targets)
    return {
        "acc": acc(scores, labels, threshold),
        "auc": auc(scores, labels),
        "eer": eer(scores, labels),
        "tpr": {f"{t:g}": v for t, v in zip(targets, tpr_at_fpr(scores, labels, targets))},
    }


def export_roc(path, scores, labels) -> None:
    fpr, tpr = roc_points(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        writer.writerows(zip(fpr.tolist(), tpr.tolist()))


def export_histogram(path, scores, labels, bins: int = 20) -> None:
    s, y = _validate(scores, labels)
    edges = np.linspace(0.0, 1.0, bins + 1)
    real, _ = np.histogram(np.clip(s[y == 1], 0, 1), bins=edges)
    attack, _ = np.histogram(np.clip(s[y == 0], 0, 1), bins=edges)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count_real", "count_attack"])
        for lo, hi, r, a in zip(edges[:-1], edges[1:], real, attack):
            writer.writerow([float(lo), float(hi), int(r), int(a)])


def read_csv(path) -> Tuple[List[str], np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=np.float64)


def plane_fit(d: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares plane a + b x + c y over masked pixels; returns (coeffs, residuals)."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {d.shape}")
    ys, xs = np.mgrid[: d.shape[0], : d.shape[1]]
    sel = np.ones(d.shape, bool) if mask is None else np.asarray(mask, bool)
    if sel.sum() < 3:
        raise ValueError("plane fit needs at least 3 pixels")
    design = np.column_stack([np.ones(sel.sum()), xs[sel], ys[sel]])
    coef, *_ = np.linalg.lstsq(design, d[sel], rcond=None)
    return coef, d[sel] - design @ coef


def planarity_probe(d, mask: Optional[np.ndarray] = None) -> float:
    """Max absolute residual of the least-squares plane fit."""
    _, resid = plane_fit(d, mask)
    return float(np.abs(resid).max())
