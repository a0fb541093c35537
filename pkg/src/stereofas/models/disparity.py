"""Attention volume -> disparity: three-tap window regression and refinement."""

from __future__ import annotations

import numpy as np

from ..autodiff import Conv2d, Module, Tensor
from ..autodiff import functional as F
from .features import ResBlock

SCALE = 4  # tokens are quarter resolution


def window_coefficients(volume: np.ndarray) -> np.ndarray:
    """Per-entry multipliers (x_l - x_r) on the 3-px window around each row's argmax.

    ``volume`` is (..., W_q, W_k). Ties go to the lowest index and window
    taps that fall outside [0, W_k) are dropped.
    """
    wq, wk = volume.shape[-2:]
    peak = np.argmax(volume, axis=-1)[..., None]  # (..., W_q, 1)
    cols = np.arange(wk)
    in_window = np.abs(cols - peak) <= 1
    offsets = np.arange(wq)[:, None] - cols[None, :]  # x_l - x_r
    return np.where(in_window, offsets, 0).astype(volume.dtype)


def attention_to_raw_disparity(volume: Tensor) -> Tensor:
    """(B, H_t, W_t, W_t) row-normalised weights -> (B, H_t, W_t) disparity in token units.

    d = sum over k in (-1, 0, 1) of a[p + k] * (x_l - (p + k)) with p the row
    argmax, accumulated in that order. The argmax position is treated as a
    constant; gradients flow through the three window weights only.
    """
    b, h, wq, wk = volume.shape
    peak = np.argmax(volume.data, axis=-1)
    bi, yi, qi = np.meshgrid(np.arange(b), np.arange(h), np.arange(wq), indexing="ij")
    d = None
    for k in (-1, 0, 1):
        col = peak + k
        valid = (col >= 0) & (col < wk)
        tap = volume[bi, yi, qi, np.clip(col, 0, wk - 1)]
        term = F.mul(tap, np.where(valid, qi - col, 0).astype(volume.dtype))
        d = term if d is None else d + term
    return d


def minmax_normalize(d: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-image min-max scaling of (B, H, W) maps to [0, 1]; flat maps become 0.5."""
    b = d.shape[0]
    flat = F.reshape(d, (b, -1))
    lo = F.amin(flat, axis=1, keepdims=True)
    hi = F.amax(flat, axis=1, keepdims=True)
    span = hi.data - lo.data
    flat_map = span <= eps
    safe = F.where(flat_map, np.ones_like(span), hi - lo)
    scaled = F.div(flat - lo, safe)
    scaled = F.where(np.broadcast_to(flat_map, scaled.shape), np.full(scaled.shape, 0.5, dtype=d.dtype), scaled)
    return F.reshape(scaled, d.shape)


class DisparityRefiner(Module):
    """Normalised full-resolution disparity -> residual conv blocks -> sigmoid."""

    def __init__(self, rng: np.random.Generator, width: int = 8, n_blocks: int = 2):
        self.inp = Conv2d(1, width, 3, rng)
        self.blocks = [ResBlock(width, width, rng) for _ in range(n_blocks)]
        self.head = Conv2d(width, 1, 3, rng)

    def forward(self, normalized: Tensor) -> Tensor:
        b, h, w = normalized.shape
        x = F.relu(self.inp(F.reshape(normalized, (b, 1, h, w))))
        for blk in self.blocks:
            x = blk(x)
        return F.reshape(F.sigmoid(self.head(x)), (b, h, w))


def upscale_disparity(raw: Tensor, height: int, width: int) -> Tensor:
    """Quarter-scale token disparity -> full-resolution pixels (scaled by 4, bilinear)."""
    return F.bilinear_resize(F.mul(raw, float(SCALE)), height, width)


def refine_disparity(raw: Tensor, height: int, width: int, refiner: DisparityRefiner):
    """Returns (pixel-scale up-sampled map, normalised map, refined map in (0, 1))."""
    pixels = upscale_disparity(raw, height, width)
    normalized = minmax_normalize(pixels)
    return pixels, normalized, refiner(normalized)
