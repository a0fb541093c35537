"""Weakly supervised objectives for the disparity and classification stages.

Functions follow the formulas literally (sums over pairs / pixels / anchors)
and accept ``reduction="mean"`` where the trainer needs size-independent
magnitudes. Batched maps are (B, H, W); unbatched (H, W) inputs are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .autodiff import functional as F

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _batched(x) -> Tensor:
    x = as_tensor(x)
    return F.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def _reduce(per_item: Tensor, reduction: str, count: Optional[float] = None) -> Tensor:
    if reduction == "sum":
        return F.sum(per_item)
    if reduction == "mean":
        n = count if count is not None else per_item.size
        return F.mul(F.sum(per_item), 1.0 / max(n, 1))
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- relative disparity
def weighted_relative_disparity_loss(d, pairs: Sequence[np.ndarray], teacher, reduction: str = "sum") -> Tensor:
    """Ordinal pair loss weighted by the teacher depth gap.

    ``pairs[b]`` is an int array of (x_i, y_i, x_j, y_j, r) rows for image b.
    r = +1 pushes d_i below d_j, r = -1 the reverse, r = 0 rows contribute
    nothing. The weight is exp(r * (teacher_j - teacher_i)).
    With ``reduction="mean"`` the sum is divided by the number of pairs.
    """
    d = _batched(d)
    teacher = np.asarray(teacher)
    if teacher.ndim == 2:
        teacher = teacher[None]
    if isinstance(pairs, np.ndarray) and pairs.ndim == 2:
        pairs = [pairs]
    rows = []
    for b, p in enumerate(pairs):
        p = np.asarray(p)
        rows.append(np.column_stack([np.full(len(p), b), p]))
    allp = np.concatenate(rows, axis=0)
    total = len(allp)
    active = allp[allp[:, 5] != 0]
    if len(active) == 0:
        return F.mul(F.sum(d), 0.0)
    bi, xi, yi, xj, yj, r = active.T
    r = r.astype(d.dtype)
    lam = np.exp(r * (teacher[bi, yj, xj] - teacher[bi, yi, xi])).astype(d.dtype)
    diff = d[bi, yi, xi] - d[bi, yj, xj]  # d_i - d_j
    # log(1 + lam * exp(r * (d_i - d_j))) == softplus(r * (d_i - d_j) + log lam)
    phi = F.softplus(F.mul(diff, r) + np.log(lam))
    return _reduce(phi, reduction, count=total)


# ---------------------------------------------------------------- reconstruction
def reconstruct_left(right, disparity) -> Tensor:
    """Left view predicted by sampling the right view at x - d (border clamped)."""
    return F.warp_horizontal(as_tensor(right), as_tensor(disparity))


def ssim(a, b, window: int = SSIM_WINDOW) -> Tensor:
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows, per image: (B,)."""
    a, b = _batched(a), _batched(b)
    mu_a = F.box_filter(a, window)
    mu_b = F.box_filter(b, window)
    var_a = F.box_filter(F.mul(a, a), window) - F.mul(mu_a, mu_a)
    var_b = F.box_filter(F.mul(b, b), window) - F.mul(mu_b, mu_b)
    cov = F.box_filter(F.mul(a, b), window) - F.mul(mu_a, mu_b)
    num = F.mul(F.mul(mu_a, mu_b) * 2.0 + SSIM_C1, cov * 2.0 + SSIM_C2)
    den = F.mul(F.mul(mu_a, mu_a) + F.mul(mu_b, mu_b) + SSIM_C1, var_a + var_b + SSIM_C2)
    return F.mean(F.div(num, den), axis=(-2, -1))


def reconstruction_loss(left, left_hat) -> Tensor:
    """0.15 * L1 + 0.85 * (1 - SSIM), averaged over the batch."""
    left, left_hat = _batched(left), _batched(left_hat)
    l1 = F.mean(F.absolute(left - left_hat), axis=(-2, -1))
    per_image = l1 * 0.15 + (1.0 - ssim(left, left_hat)) * 0.85
    return F.mean(per_image)


# ---------------------------------------------------------------- smoothness
def _forward_diffs(x: Tensor):
    """|d/dx| and |d/dy| by forward differences; last column/row set to 0."""
    gx = F.absolute(x[..., :, 1:] - x[..., :, :-1])
    gy = F.absolute(x[..., 1:, :] - x[..., :-1, :])
    return gx, gy


def disparity_smooth_loss(d, image, reduction: str = "sum") -> Tensor:
    """Edge-aware smoothness: 0.2 |grad d| e^{-|grad L|} + 0.8 |grad L| e^{-|grad d|}.

    The zero gradients of the last row/column add nothing, so only the valid
    differences are summed. ``reduction="mean"`` divides by B*H*W.
    """
    d, image = _batched(d), _batched(image)
    dx, dy = _forward_diffs(d)
    lx, ly = _forward_diffs(image)
    term = (
        F.sum(F.mul(dx, F.exp(-lx))) * 0.2
        + F.sum(F.mul(dy, F.exp(-ly))) * 0.2
        + F.sum(F.mul(lx, F.exp(-dx))) * 0.8
        + F.sum(F.mul(ly, F.exp(-dy))) * 0.8
    )
    if reduction == "sum":
        return term
    if reduction == "mean":
        return F.mul(term, 1.0 / d.size)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- confidence maps
def focal_confidence_map_loss(c, teacher, true_prob, reduction: str = "sum") -> Tensor:
    """sum_ij exp(1 - p) (c_ij - teacher_ij)^2 with p the true-class probability.

    ``c`` (B, H, W), ``teacher`` (B, H, W), ``true_prob`` (B,) or scalar.
    ``reduction="mean"`` divides by B*H*W.
    """
    c = _batched(c)
    teacher = np.asarray(teacher, dtype=c.dtype)
    if teacher.ndim == 2:
        teacher = teacher[None]
    p = as_tensor(true_prob)
    if p.ndim == 0:
        p = F.reshape(p, (1,))
    weight = F.reshape(F.exp(1.0 - p), (c.shape[0], 1, 1))
    sq = F.mul(c - teacher, c - teacher)
    return _reduce(F.mul(weight, sq), reduction)


def confidence_map_triplet_loss(features, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on latent vectors (N, D).

    For each anchor with both a same-class partner and an other-class sample:
    max(0, farthest positive - nearest negative + margin). Summed over anchors.
    """
    f = as_tensor(features)
    labels = np.asarray(labels)
    n = f.shape[0]
    if n < 2:
        raise ValueError(f"triplet loss needs at least 2 samples, got {n}")
    diff = F.reshape(f, (n, 1, -1)) - F.reshape(f, (1, n, -1))
    sq = F.sum(F.mul(diff, diff), axis=-1)
    # keep sqrt differentiable on the diagonal
    dist = F.sqrt(sq + 1e-12)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        return F.mul(F.sum(f), 0.0)
    big = 1e6
    pos = F.amax(F.where(pos_mask, dist, -big), axis=1)
    neg = F.amin(F.where(neg_mask, dist, big), axis=1)
    hinge = F.relu(pos - neg + margin)
    return F.sum(F.mul(hinge, valid.astype(f.dtype)))


def focal_classification_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.5) -> Tensor:
    """Binary focal loss on real-vs-attack logits, averaged over the batch.

    ``logits`` are the pre-sigmoid scores of the positive (real) class.
    """
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=z.dtype)
    sign = 2 * y - 1
    zt = F.mul(z, sign)  # logit of the true class
    log_pt = F.log_sigmoid(zt)
    pt = F.sigmoid(zt)
    weight = F.power(1.0 - pt, gamma) if gamma != 0 else None
    loss = -log_pt if weight is None else -F.mul(weight, log_pt)
    return F.mul(F.mean(loss), alpha)


# ---------------------------------------------------------------- bundle
@dataclass
class LossBundle:
    terms: Dict[str, Tensor]
    weights: Dict[str, float] = field(default_factory=dict)

    def total(self) -> Tensor:
        out = None
        for name, value in self.terms.items():
            w = self.weights.get(name, 1.0)
            if w == 0:
                continue
            part = F.mul(value, w)
            out = part if out is None else out + part
        if out is None:
            raise ValueError("every loss term is disabled")
        return out

    def values(self) -> Dict[str, float]:
        return {name: float(t.data) for name, t in self.terms.items()}
