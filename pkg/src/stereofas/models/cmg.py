"""Confidence map generator: a dual-branch gated network over the refined
disparity map and the left image.

Each encoder branch is two stride-2 conv blocks followed by two windowed-MLP
blocks that each halve the resolution, ending at 1/16 scale. The disparity
branch gates the image branch by an elementwise product; two more MLP blocks
follow. A 1x1 projection gives the 2-channel map (channel 0 real, channel 1
attack), up-sampled with a final sigmoid; pooled features feed the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..autodiff import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor
from ..autodiff import functional as F
from ..autodiff.nn import glorot_uniform
from .dma import TokenDown, to_first, to_last
from .features import ResBlock

REAL, ATTACK = 0, 1
VARIANTS = ("gated", "nongated", "disparity_only")


@dataclass
class ConfidenceOutput:
    confidence: Tensor  # (B, 2, H, W) in (0, 1)
    logits: Tensor  # (B, 2): (real, attack)
    features: Tensor  # (B, D) pooled latent vectors

    @property
    def score(self) -> np.ndarray:
        """Probability of a real face: sigmoid(l_real - l_attack)."""
        z = self.logits.data[:, REAL] - self.logits.data[:, ATTACK]
        return 1.0 / (1.0 + np.exp(-z))

    def score_logit(self) -> Tensor:
        """Differentiable l_real - l_attack."""
        return self.logits[:, REAL] - self.logits[:, ATTACK]


def classify(score, threshold: float = 0.5) -> np.ndarray:
    """1 (real) where score >= threshold, else 0 (attack)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(score) >= threshold).astype(np.int64)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=2)
        self.mix = Conv2d(c_out, c_out, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.conv(x))
        return F.relu(h + self.mix(h))


def window_partition(x: Tensor, win: int) -> Tensor:
    """(B, H, W, C) -> (B, nH, nW, C, win*win)."""
    b, h, w, c = x.shape
    t = F.reshape(x, (b, h // win, win, w // win, win, c))
    t = F.transpose(t, (0, 1, 3, 5, 2, 4))
    return F.reshape(t, (b, h // win, w // win, c, win * win))


def window_merge(t: Tensor, h: int, w: int, win: int) -> Tensor:
    b, nh, nw, c, _ = t.shape
    t = F.reshape(t, (b, nh, nw, c, win, win))
    t = F.transpose(t, (0, 1, 4, 2, 5, 3))
    return F.reshape(t, (b, h, w, c))


class WindowMLPBlock(Module):
    """Spatial mixing inside non-overlapping windows, then a per-token channel MLP.

    Works channel-last on (B, H, W, C); windows are ``window`` x ``window``
    (clipped to the map size).
    """

    def __init__(self, channels: int, rng: np.random.Generator, window: int = 4, expansion: int = 2):
        self.window = window
        n = window * window
        self.norm1 = LayerNorm(channels)
        self.spatial_w = Parameter(np.eye(n) + glorot_uniform(rng, (n, n), n, n) * 0.1)
        self.spatial_b = Parameter(np.zeros(n))
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(channels, channels * expansion, rng)
        self.fc2 = Linear(channels * expansion, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        # largest window up to the configured size that tiles the map exactly
        win = max(k for k in range(1, self.window + 1) if h % k == 0 and w % k == 0)
        n = win * win
        wmat = self.spatial_w[:n, :n]
        t = window_partition(self.norm1(x), win)
        t = F.linear(t, wmat, self.spatial_b[:n])
        x = x + window_merge(t, h, w, win)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class MLPStage(Module):
    """Windowed-MLP block followed by 2x2 token merging (C -> 2C, half resolution)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.block = WindowMLPBlock(channels, rng)
        self.down = TokenDown(channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(to_first(self.block(to_last(x))))


class Branch(Module):
    """1-channel map at H x W -> (B, 8*base, H/16, W/16)."""

    def __init__(self, rng: np.random.Generator, base: int = 8):
        self.conv = [ConvBlock(1, base, rng), ConvBlock(base, 2 * base, rng)]
        self.mlp = [MLPStage(2 * base, rng), MLPStage(4 * base, rng)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.conv + self.mlp:
            x = layer(x)
        return x


class Head(Module):
    """Two windowed-MLP blocks, 1x1 projection to 2 channels, pooled logits."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.blocks = [WindowMLPBlock(channels, rng) for _ in range(2)]
        self.norm = LayerNorm(channels)
        self.proj = Linear(channels, 2, rng)
        self.fc = Linear(channels, 2, rng)

    def forward(self, x: Tensor):
        t = to_last(x)
        for blk in self.blocks:
            t = blk(t)
        t = self.norm(t)
        map_logits = to_first(self.proj(t))  # (B, 2, h, w)
        pooled = F.mean(t, axis=(1, 2))
        return map_logits, self.fc(pooled), pooled


def _check_inputs(disparity: Tensor, left: Optional[Tensor]):
    if disparity.ndim != 3:
        raise ValueError(f"disparity must be (B, H, W), got {disparity.shape}")
    if left is not None and left.shape != disparity.shape:
        raise ValueError(f"disparity {disparity.shape} and left image {left.shape} differ in shape")
    h, w = disparity.shape[1:]
    if h % 16 or w % 16:
        raise ValueError(f"input size must be a multiple of 16, got {h}x{w}")


def _as_channel(x: Tensor) -> Tensor:
    return F.reshape(x, (x.shape[0], 1) + x.shape[1:])


def _finish(map_logits: Tensor, h: int, w: int) -> Tensor:
    return F.sigmoid(F.bilinear_resize(map_logits, h, w))


class ConfidenceMapGenerator(Module):
    def __init__(self, rng: np.random.Generator, base: int = 8, variant: str = "gated"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown CMG variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        width = 8 * base
        if variant == "disparity_only":
            self.disp_net = [ResBlock(1, base, rng, stride=2), ResBlock(base, 2 * base, rng, stride=2),
                             ResBlock(2 * base, 4 * base, rng, stride=2), ResBlock(4 * base, width, rng, stride=2)]
            self.head = Head(width, rng)
            return
        self.disp_branch = Branch(rng, base)
        self.image_branch = Branch(rng, base)
        self.head = Head(width, rng)
        if variant == "nongated":
            self.image_head = Head(width, rng)

    def gated_features(self, disparity: Tensor, left: Tensor) -> Tensor:
        """Elementwise product of the two branch encodings, (B, C, H/16, W/16)."""
        return F.mul(self.disp_branch(_as_channel(disparity)), self.image_branch(_as_channel(left)))

    def forward(self, disparity: Tensor, left: Optional[Tensor] = None) -> ConfidenceOutput:
        h, w = disparity.shape[1:]
        if self.variant == "disparity_only":
            _check_inputs(disparity, None)
            x = _as_channel(disparity)
            for blk in self.disp_net:
                x = blk(x)
            m, logits, pooled = self.head(x)
            return ConfidenceOutput(_finish(m, h, w), logits, pooled)
        if left is None:
            raise ValueError(f"the {self.variant} generator needs the left image")
        _check_inputs(disparity, left)
        if self.variant == "gated":
            m, logits, pooled = self.head(self.gated_features(disparity, left))
            return ConfidenceOutput(_finish(m, h, w), logits, pooled)
        md, ld, pd = self.head(self.disp_branch(_as_channel(disparity)))
        mi, li, pi = self.image_head(self.image_branch(_as_channel(left)))
        return ConfidenceOutput(_finish(F.mul(md + mi, 0.5), h, w), ld + li, F.concat([pd, pi], axis=-1))
