"""Synthetic rectified stereo scenes: curved "real face" surfaces vs planar attacks.

Disparity is proportional to the column index along the background (the
surface meets the left image border at zero disparity), so every left pixel
has an in-bounds correspondence in the right view. Real scenes add an
ellipsoidal bump; attack scenes are a single plane. The left view is the
bilinear resampling of the right view at ``x - disparity``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .io import ManifestError, ManifestRecord, quantize, read_dsp, read_manifest, read_pgm, write_dsp, write_manifest, write_pgm

ILLUMINATION = {"dim": 0.45, "normal": 0.8, "bright": 1.0}
DISTANCE = {"far": 1.0, "mid": 2.0, "near": 3.0}

# column layout of a pair array
PAIR_COLUMNS = ("x_i", "y_i", "x_j", "y_j", "r")


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    label: int = 1
    illum: str = "normal"
    dist: str = "mid"
    bump_amplitude: float = 3.0
    face_radius: Tuple[float, float] = (0.24, 0.32)  # fraction of (width, height)
    center_jitter: float = 0.2  # face centre offset, fraction of each side
    slope_jitter: float = 0.25
    texture_scale: int = 4
    noise_level: float = 0.0
    n_pairs: int = 256
    tau: float = 0.02


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray
    label: int
    teacher_depth: np.ndarray
    pairs: np.ndarray
    foreground: np.ndarray
    illum: str = "normal"
    dist: str = "mid"
    meta: Dict[str, float] = field(default_factory=dict)


def _texture(rng: np.random.Generator, h: int, w: int, scale: int, contrast: float) -> np.ndarray:
    """Band-limited noise: coarse random lattice, bilinearly upsampled, plus a grating."""
    gh, gw = h // scale + 3, w // scale + 3
    coarse = rng.uniform(-1, 1, size=(gh, gw))
    ys = (np.arange(h) + 0.5) / scale + 1.0
    xs = (np.arange(w) + 0.5) / scale + 1.0
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    ty, tx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    smooth = (1 - ty) * ((1 - tx) * c00 + tx * c01) + ty * ((1 - tx) * c10 + tx * c11)
    freq = rng.uniform(0.05, 0.15)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    grating = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
    tex = 0.75 * smooth + 0.25 * grating
    tex = tex / max(np.abs(tex).max(), 1e-6)
    return np.clip(0.5 + 0.5 * contrast * tex, 0.0, 1.0)


def sample_right_at(right: np.ndarray, disparity: np.ndarray) -> np.ndarray:
    """Linear interpolation of each row of ``right`` at x - disparity (border clamped)."""
    h, w = right.shape
    xs = np.clip(np.arange(w)[None, :] - disparity, 0, w - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    t = xs - x0
    rows = np.arange(h)[:, None]
    return (1 - t) * right[rows, x0] + t * right[rows, x1]


def render_disparity(rng: np.random.Generator, params: SceneParams) -> Tuple[np.ndarray, np.ndarray, Dict[str, float]]:
    """Ground-truth disparity and foreground mask for one scene."""
    h, w = params.height, params.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    edge_disp = DISTANCE[params.dist] * (1 + rng.uniform(-params.slope_jitter, params.slope_jitter))
    slope = edge_disp / (w - 1)
    disparity = slope * xx
    meta = {"slope": slope}
    if params.label == 1:
        cx = w / 2 + rng.uniform(-params.center_jitter, params.center_jitter) * w
        cy = h / 2 + rng.uniform(-params.center_jitter, params.center_jitter) * h
        rx = params.face_radius[0] * w * rng.uniform(0.9, 1.1)
        ry = params.face_radius[1] * h * rng.uniform(0.9, 1.1)
        rho2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        foreground = rho2 < 1.0
        amp = params.bump_amplitude * rng.uniform(0.85, 1.15)
        disparity = disparity + amp * np.sqrt(np.clip(1.0 - rho2, 0.0, None))
        meta.update(cx=cx, cy=cy, rx=rx, ry=ry, amplitude=amp)
    else:
        foreground = np.ones((h, w), dtype=bool)
    return disparity, foreground, meta


def make_teacher_depth(gt_disparity: np.ndarray, foreground: np.ndarray, body_scale: float = 0.5) -> np.ndarray:
    """Fuse a face-depth teacher and a body-segmentation teacher by averaging.

    The face teacher is the min-max normalised disparity over the foreground
    (zero elsewhere); the body teacher is the mask scaled by ``body_scale``.
    """
    fg = np.asarray(foreground, dtype=bool)
    if not fg.any():
        raise ValueError("foreground mask is empty; teacher depth is undefined")
    vals = gt_disparity[fg]
    lo, hi = vals.min(), vals.max()
    face = np.zeros_like(gt_disparity, dtype=np.float64)
    face[fg] = (gt_disparity[fg] - lo) / (hi - lo) if hi > lo else 0.5
    body = body_scale * fg
    return np.clip((face + body) / 2.0, 0.0, 1.0).astype(np.float32)


def sample_rel_pairs(teacher_depth: np.ndarray, k: int = 256, tau: float = 0.02, seed: int = 0) -> np.ndarray:
    """K random pixel pairs with ordinal labels from the teacher map.

    Returns an int array with columns ``PAIR_COLUMNS``. ``r = +1`` means the
    teacher puts pixel i below pixel j by more than ``tau`` (so the relative
    loss pushes d_i under d_j), ``-1`` the reverse, ``0`` within the band.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    rng = np.random.default_rng(seed)
    h, w = teacher_depth.shape
    n = h * w
    a = rng.integers(0, n, size=k)
    b = rng.integers(0, n, size=k)
    clash = a == b
    while clash.any():
        b[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = a == b
    flat = teacher_depth.reshape(-1)
    diff = flat[b].astype(np.float64) - flat[a].astype(np.float64)
    r = np.where(diff > tau, 1, np.where(diff < -tau, -1, 0))
    return np.stack([a % w, a // w, b % w, b // w, r], axis=1).astype(np.int64)


def generate_scene(seed, params: SceneParams = SceneParams()) -> StereoSample:
    h, w = params.height, params.width
    if h % 8 or w % 8 or h < 32 or w < 32:
        raise ValueError(f"image size must be multiples of 8 and at least 32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    disparity, foreground, meta = render_disparity(rng, params)
    if disparity.max() >= w / 4:
        raise ValueError(f"max disparity {disparity.max():.2f} >= W/4 = {w / 4}; cannot be matched")
    right = quantize(_texture(rng, h, w, params.texture_scale, ILLUMINATION[params.illum]))
    left = sample_right_at(right.astype(np.float64), disparity)
    if params.noise_level > 0:
        left = left + rng.normal(0, params.noise_level, size=left.shape)
    left = quantize(left)
    teacher = make_teacher_depth(disparity, foreground)
    pairs = sample_rel_pairs(teacher, params.n_pairs, params.tau, seed=int(rng.integers(2**31)))
    return StereoSample(
        left=left,
        right=right,
        gt_disparity=disparity.astype(np.float32),
        label=int(params.label),
        teacher_depth=teacher,
        pairs=pairs,
        foreground=foreground,
        illum=params.illum,
        dist=params.dist,
        meta=meta,
    )


def scene_for_index(global_seed: int, index: int, height: int = 64, width: int = 64) -> StereoSample:
    """Sample ``index`` of a seeded dataset; depends only on (global_seed, index)."""
    rng = np.random.default_rng([global_seed, index])
    params = SceneParams(
        height=height,
        width=width,
        label=index % 2,
        illum=str(rng.choice(list(ILLUMINATION))),
        dist=str(rng.choice(list(DISTANCE))),
    )
    return generate_scene(int(rng.integers(2**63 - 1)), params)


# ---------------------------------------------------------------- datasets on disk
def generate_dataset(out_dir, n_train: int, n_test: int, height: int = 64, width: int = 64,
                     seed: int = 0) -> Path:
    """Render ``n_train + n_test`` samples under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    records: List[ManifestRecord] = []
    for i in range(n_train + n_test):
        sample = scene_for_index(seed, i, height, width)
        sid = f"s{i:05d}"
        rec = ManifestRecord(
            id=sid,
            left=f"views/{sid}_L.pgm",
            right=f"views/{sid}_R.pgm",
            disp=f"maps/{sid}_disp.dsp",
            teacher=f"maps/{sid}_teacher.dsp",
            label=sample.label,
            split="train" if i < n_train else "test",
            illum=sample.illum,
            dist=sample.dist,
        )
        write_pgm(out / rec.left, sample.left)
        write_pgm(out / rec.right, sample.right)
        write_dsp(out / rec.disp, sample.gt_disparity)
        write_dsp(out / rec.teacher, sample.teacher_depth)
        records.append(rec)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


@dataclass
class StereoDataset:
    """In-memory arrays for one split of a manifest."""

    ids: List[str]
    views: np.ndarray  # (N, 2, H, W) left/right
    labels: np.ndarray  # (N,)
    teacher: np.ndarray  # (N, H, W)
    gt_disparity: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "StereoDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            ids=[self.ids[i] for i in idx],
            views=self.views[idx],
            labels=self.labels[idx],
            teacher=self.teacher[idx],
            gt_disparity=None if self.gt_disparity is None else self.gt_disparity[idx],
        )


def load_split(manifest_path, split: Optional[str] = None) -> StereoDataset:
    from .io import ShapeMismatchError

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = [r for r in read_manifest(manifest_path) if split is None or r.split == split]
    if not records:
        raise ManifestError(f"no records with split={split!r} in {manifest_path}")
    views, teacher, disp = [], [], []
    for rec in records:
        left = read_pgm(rec.resolve(root, "left"))
        right = read_pgm(rec.resolve(root, "right"))
        d = read_dsp(rec.resolve(root, "disp"))
        t = read_dsp(rec.resolve(root, "teacher"))
        if not (left.shape == right.shape == d.shape == t.shape):
            raise ShapeMismatchError(
                f"{rec.id}: left {left.shape}, right {right.shape}, disp {d.shape}, teacher {t.shape}"
            )
        views.append(np.stack([left, right]))
        teacher.append(t)
        disp.append(d)
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"samples have differing sizes: {sorted(shapes)}")
    return StereoDataset(
        ids=[r.id for r in records],
        views=np.stack(views).astype(np.float32),
        labels=np.array([r.label for r in records], dtype=np.int64),
        teacher=np.stack(teacher).astype(np.float32),
        gt_disparity=np.stack(disp).astype(np.float32),
    )
