"""Dynamic matching attention (DMA) transformer.

Tokens are kept channel-first, ``(B, C, H_t, W_t)``; attention runs along
each token row. In the default (split) mode every block gives half of its
channels and heads to row-wise self-attention and half to left/right
cross-attention. Each attention branch works at two scales (stride-1 and
stride-2 depthwise convolutions of Q, K, V) and adds the previous block's
attention weights, resized, to its logits before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..autodiff import DWConv2d, Linear, Module, Parameter, Tensor
from ..autodiff import functional as F
from .features import patch_merge

Residual = Tuple[Tensor, Tensor]

QK_GAIN = 2.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DmaConfig:
    n_blocks: int = 4
    channels: int = 32
    n_heads: int = 8
    down_after: Tuple[int, ...] = (1,)
    up_after: Tuple[int, ...] = (3,)
    split_heads: bool = True

    def levels(self) -> List[int]:
        """Resolution level (0 = input, 1 = half, ...) of every block."""
        level, out = 0, []
        for i in range(1, self.n_blocks + 1):
            out.append(level)
            level += (i in self.down_after) - (i in self.up_after)
        if level != 0:
            raise ConfigError(
                f"down/up schedule {self.down_after}/{self.up_after} ends at level {level}, not at input resolution"
            )
        return out

    def kinds(self) -> List[str]:
        if self.split_heads:
            return ["split"] * self.n_blocks
        # alternate self / cross, ending on cross so the last block can emit the volume
        return ["cross" if (self.n_blocks - 1 - i) % 2 == 0 else "self" for i in range(self.n_blocks)]

    def validate(self) -> None:
        if self.n_heads % 2:
            raise ConfigError(f"n_heads must be even, got {self.n_heads}")
        if self.channels % self.n_heads:
            raise ConfigError(f"channels {self.channels} not divisible by n_heads {self.n_heads}")
        if min(self.levels()) < 0:
            raise ConfigError("up-sampling before any down-sampling")


class HeadProjection(Module):
    """Affine map with an independent (C_h x C_h) weight and bias per head.

    Stored as one block-diagonal matrix so the projection is a single GEMM;
    off-block entries are held at zero by a constant mask.
    """

    def __init__(self, channels: int, n_heads: int, rng: np.random.Generator):
        ch = channels // n_heads
        blocks = [rng.uniform(-1, 1, size=(ch, ch)) * np.sqrt(6.0 / (2 * ch)) for _ in range(n_heads)]
        mask = np.kron(np.eye(n_heads), np.ones((ch, ch)))
        w = np.zeros((channels, channels))
        for h, blk in enumerate(blocks):
            w[h * ch : (h + 1) * ch, h * ch : (h + 1) * ch] = blk
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(channels))
        self._mask = mask.astype(self.weight.dtype)
        self.n_heads = n_heads

    def forward(self, x: Tensor) -> Tensor:
        """Channel-last (..., C) -> (..., C)."""
        return F.linear(x, F.mul(self.weight, self._mask), self.bias)


def to_last(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 2, 3, 1))


def to_first(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 3, 1, 2))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, C, H, W) -> (B, n, H, W, C/n)."""
    b, c, h, w = x.shape
    t = F.reshape(x, (b, n_heads, c // n_heads, h, w))
    return F.transpose(t, (0, 1, 3, 4, 2))


def resize_attention(alpha: Tensor, rows: int, width: int) -> Tensor:
    """Resize (B, n, H, Wq, Wk) weights along rows, queries and keys."""
    out = F.resize_axis(alpha, 2, rows)
    out = F.resize_axis(out, 3, width)
    return F.resize_axis(out, 4, width)


def attention_mask(width: int, mode: Optional[str]) -> Optional[np.ndarray]:
    """True where a (query, key) pair is forbidden.

    ``"left"``: left-image queries may only match right keys with x_r <= x_l.
    ``"right"``: right-image queries only match left keys with x_l >= x_r.
    """
    if mode is None:
        return None
    q = np.arange(width)[:, None]
    k = np.arange(width)[None, :]
    if mode == "left":
        return k > q
    if mode == "right":
        return k < q
    raise ValueError(f"unknown mask mode {mode!r}")


class MultiScaleAttention(Module):
    def __init__(self, channels: int, n_heads: int, rng: np.random.Generator):
        if channels % n_heads:
            raise ConfigError(f"channels {channels} not divisible by heads {n_heads}")
        self.channels = channels
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.q_proj = HeadProjection(channels, n_heads, rng)
        self.k_proj = HeadProjection(channels, n_heads, rng)
        self.v_proj = HeadProjection(channels, n_heads, rng)
        self.q_dw = [DWConv2d(channels, 3, rng, stride=s) for s in (1, 2)]
        self.k_dw = [DWConv2d(channels, 3, rng, stride=s) for s in (1, 2)]
        self.v_dw = [DWConv2d(channels, 3, rng, stride=s) for s in (1, 2)]
        self.out = Linear(2 * channels, channels, rng)
        self._matching_init()

    def _matching_init(self, jitter: float = 0.1) -> None:
        # Start Q.K as a similarity: keys share the query projection and the
        # depthwise filters begin near identity, so equal content scores highest.
        qk = np.eye(self.channels) * QK_GAIN + self.q_proj.weight.data * jitter
        self.q_proj.weight.data = qk.astype(self.q_proj.weight.dtype)
        self.k_proj.weight.data = self.q_proj.weight.data.copy()
        for dws in (self.q_dw, self.k_dw, self.v_dw):
            for dw in dws:
                w = dw.weight.data * jitter
                w[:, 0, 1, 1] += 1.0
                dw.weight.data = w
        for q, k in zip(self.q_dw, self.k_dw):
            k.weight.data = q.weight.data.copy()

    def project(self, x_query: Tensor, x_key: Tensor):
        """Per-head Q (from the query map) and K, V (from the key map), channel-first."""
        q = to_first(self.q_proj(to_last(x_query)))
        k = to_first(self.k_proj(to_last(x_key)))
        v = to_first(self.v_proj(to_last(x_key)))
        return q, k, v

    def attend(self, q: Tensor, k: Tensor, v: Tensor, residual: Optional[Residual] = None,
               mask: Optional[str] = None) -> Tuple[Tensor, Residual]:
        """Two-scale attention on channel-first Q, K, V; returns channel-last V_O."""
        b, c, h, w = q.shape
        if w % 2 or h % 2:
            raise ValueError(f"token map must have even size for the stride-2 branch, got {h}x{w}")
        outs, alphas = [], []
        for scale in (0, 1):
            qs = split_heads(self.q_dw[scale](q), self.n_heads)
            ks = split_heads(self.k_dw[scale](k), self.n_heads)
            vs = split_heads(self.v_dw[scale](v), self.n_heads)
            logits = F.mul(qs @ F.transpose(ks, (0, 1, 2, 4, 3)), 1.0 / np.sqrt(self.head_dim))
            if residual is not None:
                logits = logits + resize_attention(residual[scale], logits.shape[2], logits.shape[3])
            forbid = attention_mask(logits.shape[-1], mask)
            if forbid is not None:
                logits = F.masked_fill(logits, forbid, -np.inf)
            alpha = F.softmax_lastdim(logits)
            o = alpha @ vs  # (B, n, h_s, w_s, C_h)
            if scale == 1:
                o = F.resize_axis(F.resize_axis(o, 2, h), 3, w)
            outs.append(o)
            alphas.append(alpha)
        cat = F.concat(outs, axis=-1)  # (B, n, H, W, 2 C_h)
        cat = F.reshape(F.transpose(cat, (0, 2, 3, 1, 4)), (b, h, w, 2 * c))
        return self.out(cat), (alphas[0], alphas[1])

    def forward(self, x_query: Tensor, x_key: Tensor, residual: Optional[Residual] = None,
                mask: Optional[str] = None) -> Tuple[Tensor, Residual]:
        q, k, v = self.project(x_query, x_key)
        return self.attend(q, k, v, residual, mask)


class FFDWN(Module):
    """Linear -> 3x3 depthwise conv -> GELU -> linear."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2):
        hidden = channels * expansion
        self.fc1 = Linear(channels, hidden, rng)
        self.dw = DWConv2d(hidden, 3, rng)
        self.fc2 = Linear(hidden, channels, rng)
        # zero output: every block starts as the identity on its token stream
        self.fc2.weight.data = np.zeros_like(self.fc2.weight.data)

    def forward(self, x: Tensor) -> Tensor:
        """Channel-last in and out."""
        h = to_last(self.dw(to_first(self.fc1(x))))
        return self.fc2(F.gelu(h))


class AttentionBranch(Module):
    """One attention branch plus its FFDWN update: E <- E + FFDWN(E + V_O)."""

    def __init__(self, channels: int, n_heads: int, rng: np.random.Generator):
        self.attn = MultiScaleAttention(channels, n_heads, rng)
        self.ff = FFDWN(channels, rng)

    def forward(self, x: Tensor, other: Tensor, residual: Optional[Residual], mask: Optional[str] = None):
        vo, alphas = self.attn(x, other, residual, mask)
        xl = to_last(x)
        return to_first(xl + self.ff(xl + vo)), alphas


class DMABlock(Module):
    def __init__(self, channels: int, n_heads: int, kind: str, rng: np.random.Generator):
        self.kind = kind
        self.channels = channels
        if kind == "split":
            self.cross = AttentionBranch(channels // 2, n_heads // 2, rng)
            self.self_ = AttentionBranch(channels // 2, n_heads // 2, rng)
        elif kind == "cross":
            self.cross = AttentionBranch(channels, n_heads, rng)
        elif kind == "self":
            self.self_ = AttentionBranch(channels, n_heads, rng)
        else:
            raise ConfigError(f"unknown block kind {kind!r}")

    def forward(self, e_left: Tensor, e_right: Tensor, residuals: Dict[str, Residual], final: bool = False):
        """Returns (E_L', E_R', residuals', left-query cross weights or None)."""
        new_res: Dict[str, Residual] = dict(residuals)
        volume = None
        if self.kind == "split":
            half = self.channels // 2
            lc, ls = e_left[:, :half], e_left[:, half:]
            rc, rs = e_right[:, :half], e_right[:, half:]
        elif self.kind == "cross":
            lc, rc, ls, rs = e_left, e_right, None, None
        else:
            ls, rs, lc, rc = e_left, e_right, None, None

        out_l, out_r = [], []
        if lc is not None:
            new_lc, new_res["cross_L"] = self.cross(lc, rc, residuals.get("cross_L"), "left" if final else None)
            volume = new_res["cross_L"][0]
            if final:
                new_rc = rc  # the right stream is not consumed after the last block
            else:
                new_rc, new_res["cross_R"] = self.cross(rc, lc, residuals.get("cross_R"))
            out_l.append(new_lc)
            out_r.append(new_rc)
        if ls is not None:
            new_ls, new_res["self_L"] = self.self_(ls, ls, residuals.get("self_L"))
            new_rs, new_res["self_R"] = self.self_(rs, rs, residuals.get("self_R"))
            out_l.append(new_ls)
            out_r.append(new_rs)
        if len(out_l) == 1:
            return out_l[0], out_r[0], new_res, volume
        return F.concat(out_l, axis=1), F.concat(out_r, axis=1), new_res, volume


class TokenDown(Module):
    """(B, C, H, W) -> (B, 2C, H/2, W/2): concatenate 2x2 neighbours, linear 4C -> 2C."""

    def __init__(self, channels: int, rng: np.random.Generator, jitter: float = 0.1):
        self.proj = Linear(4 * channels, 2 * channels, rng)
        # start as (2x2 mean, mean horizontal half-difference) per channel, which TokenUp inverts
        w = self.proj.weight.data * jitter
        for c in range(channels):
            w[c, 4 * c : 4 * c + 4] += 0.25
            w[channels + c, 4 * c : 4 * c + 4] += [0.25, -0.25, 0.25, -0.25]
        self.proj.weight.data = w

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"down-sampling needs even token dims, got {h}x{w}")
        return to_first(self.proj(patch_merge(x, 2)))


class TokenUp(Module):
    """(B, C, H, W) -> (B, C/2, 2H, 2W): linear C -> 2C, redistribute over 2x2."""

    def __init__(self, channels: int, rng: np.random.Generator, jitter: float = 0.1):
        self.proj = Linear(channels, 2 * channels, rng)
        half = channels // 2
        w = self.proj.weight.data * jitter
        for c in range(half):
            w[4 * c : 4 * c + 4, c] += 1.0
            w[4 * c : 4 * c + 4, half + c] += [1.0, -1.0, 1.0, -1.0]
        self.proj.weight.data = w

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        t = self.proj(to_last(x))  # (B, H, W, 2C) laid out as (C/2, 2, 2)
        t = F.reshape(t, (b, h, w, c // 2, 2, 2))
        t = F.transpose(t, (0, 3, 1, 4, 2, 5))
        return F.reshape(t, (b, c // 2, 2 * h, 2 * w))


class DMATransformer(Module):
    def __init__(self, cfg: DmaConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        levels = cfg.levels()
        kinds = cfg.kinds()
        self.blocks = [DMABlock(cfg.channels * 2**lvl, cfg.n_heads, kind, rng) for lvl, kind in zip(levels, kinds)]
        self.down = []
        self.up = []
        for i, lvl in enumerate(levels, start=1):
            c = cfg.channels * 2**lvl
            if i in cfg.down_after:
                self.down.append(TokenDown(c, rng))
            if i in cfg.up_after:
                self.up.append(TokenUp(c, rng))

    def forward(self, left: Tensor, right: Tensor) -> Tensor:
        """Token maps (B, C, H_t, W_t) -> masked left-query matching volume (B, H_t, W_t, W_t)."""
        if left.shape != right.shape:
            raise ValueError(f"left tokens {left.shape} and right tokens {right.shape} differ")
        residuals: Dict[str, Residual] = {}
        n_down = n_up = 0
        volume = None
        for i, block in enumerate(self.blocks, start=1):
            final = i == len(self.blocks)
            left, right, residuals, volume = block(left, right, residuals, final=final)
            if i in self.cfg.down_after:
                left, right = self.down[n_down](left), self.down[n_down](right)
                n_down += 1
            if i in self.cfg.up_after:
                left, right = self.up[n_up](left), self.up[n_up](right)
                n_up += 1
        if volume is None:
            raise ConfigError("final block produced no cross-attention volume")
        return F.mean(volume, axis=1)  # average over cross heads
