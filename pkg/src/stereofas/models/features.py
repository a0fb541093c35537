"""Hourglass feature extractor producing quarter-resolution tokens for both views."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from ..autodiff import Conv2d, LayerNorm, Linear, Module, Tensor
from ..autodiff import functional as F


class ResBlock(Module):
    """Two 3x3 convolutions with a residual connection (1x1 projection when shapes change)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng, stride=stride) if (stride != 1 or c_in != c_out) else None

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        shortcut = self.skip(x) if self.skip is not None else x
        return F.relu(h + shortcut)


def sinusoidal_encoding(width: int, channels: int, dtype=np.float32) -> np.ndarray:
    """(channels, width) table; even channels sine, odd channels cosine."""
    pos = np.arange(width)[None, :]
    i = np.arange(channels)[:, None]
    rate = 1.0 / (10000.0 ** ((2 * (i // 2)) / channels))
    angle = pos * rate
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def patch_merge(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, H/p, W/p, C*p*p): concatenate each p x p neighbourhood."""
    b, c, h, w = x.shape
    t = F.reshape(x, (b, c, h // patch, patch, w // patch, patch))
    t = F.transpose(t, (0, 2, 4, 1, 3, 5))
    return F.reshape(t, (b, h // patch, w // patch, c * patch * patch))


class FeatureExtractor(Module):
    """Encoder (two stride-2 residual blocks), one up-sampling block with a skip
    connection, then a linear embedding of each 2x2 patch of the half-resolution
    map (a 4x4 pixel footprint) to ``channels`` dims, plus a width-wise
    sinusoidal position code.

    Each image is standardised first and the embedded tokens are layer-normed,
    so image content and the position code enter attention at the same scale."""

    def __init__(self, rng: np.random.Generator, channels: int = 32, base: int = 16):
        self.channels = channels
        self.stem = Conv2d(1, base, 3, rng)
        self.enc1 = ResBlock(base, base, rng, stride=2)
        self.enc2 = ResBlock(base, 2 * base, rng, stride=2)
        self.dec = Conv2d(3 * base, base, 3, rng)
        self.embed = Linear(4 * base, channels, rng)
        self.norm = LayerNorm(channels)

    def encode(self, images: Tensor) -> Tensor:
        """(B, H, W) or (B, 1, H, W) images -> (B, C, H/4, W/4) tokens."""
        x = images if images.ndim == 4 else F.reshape(images, (images.shape[0], 1) + images.shape[1:])
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"image size must be a multiple of 8, got {h}x{w}")
        mu = F.mean(x, axis=(2, 3), keepdims=True)
        centred = x - mu
        sd = F.sqrt(F.mean(F.mul(centred, centred), axis=(2, 3), keepdims=True) + 1e-6)
        s = F.relu(self.stem(F.div(centred, sd)))
        e1 = self.enc1(s)
        e2 = self.enc2(e1)
        up = F.bilinear_resize(e2, e1.shape[2], e1.shape[3])
        d = F.relu(self.dec(F.concat([up, e1], axis=1)))
        tok = self.norm(self.embed(patch_merge(d, 2)))  # (B, H/4, W/4, C)
        tok = F.transpose(tok, (0, 3, 1, 2))
        pe = sinusoidal_encoding(tok.shape[-1], self.channels, dtype=tok.dtype)
        return tok + pe[None, :, None, :]

    def forward(self, left: Tensor, right: Tensor) -> Tuple[Tensor, Tensor]:
        n = left.shape[0]
        both = self.encode(F.concat([left, right], axis=0))
        return both[:n], both[n:]
