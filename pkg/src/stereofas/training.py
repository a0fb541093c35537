"""Two-stage training, inference and evaluation.

Stage 1 fits the disparity network (feature extractor, matching transformer,
refiner) with the relative-pair, reconstruction and smoothness losses. Stage 2
freezes it and fits the confidence map generator with the confidence-map,
triplet and classification losses.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import losses as L
from . import metrics
from .autodiff import Adam, Module, Tensor, no_grad
from .autodiff import functional as F
from .config import STAGE1_LOSSES, STAGE2_LOSSES, TrainConfig, config_from_dict
from .data.io import write_dsp
from .data.synth import StereoDataset, load_split, sample_rel_pairs
from .models.checkpoint import CheckpointError, load_weights, save_weights
from .models.cmg import ATTACK, REAL, ConfidenceMapGenerator, ConfidenceOutput
from .models.disparity import DisparityRefiner, attention_to_raw_disparity, refine_disparity
from .models.dma import DMATransformer
from .models.features import FeatureExtractor

log = logging.getLogger(__name__)


@dataclass
class DisparityOutput:
    volume: Tensor  # (B, H/4, W/4, W/4)
    raw: Tensor  # (B, H/4, W/4) token units
    pixels: Tensor  # (B, H, W) pixel-scale up-sampled disparity
    refined: Tensor  # (B, H, W) in (0, 1)


class StereoSpoofNet(Module):
    """Disparity network plus confidence map generator."""

    def __init__(self, cfg: TrainConfig):
        rng = np.random.default_rng(cfg.seed)
        m = cfg.model
        self.features = FeatureExtractor(rng, channels=m.channels)
        self.transformer = DMATransformer(cfg.dma_config(), rng)
        self.refiner = DisparityRefiner(rng, width=m.refine_width)
        self.cmg = ConfidenceMapGenerator(rng, base=m.cmg_base, variant=cfg.ablation.cmg_variant)

    def disparity_modules(self) -> List[Module]:
        return [self.features, self.transformer, self.refiner]

    def disparity_parameters(self):
        return [p for mod in self.disparity_modules() for p in mod.parameters()]

    def disparity(self, left: Tensor, right: Tensor) -> DisparityOutput:
        h, w = left.shape[-2:]
        tl, tr = self.features(left, right)
        volume = self.transformer(tl, tr)
        raw = attention_to_raw_disparity(volume)
        pixels, _, refined = refine_disparity(raw, h, w, self.refiner)
        return DisparityOutput(volume, raw, pixels, refined)

    def classify(self, refined: Tensor, left: Tensor) -> ConfidenceOutput:
        return self.cmg(refined, left)


# ------------------------------------------------------------------ checkpoints
def save_model(path, net: StereoSpoofNet, cfg: TrainConfig, stage: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    if stage == 1:
        # the confidence generator is untrained until stage 2
        state = type(state)((k, v) for k, v in state.items() if not k.startswith("cmg."))
    save_weights(path, state)
    sidecar = {"stage": stage, "config": cfg.to_dict()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_model(path, expect_stage: Optional[int] = None):
    """Returns (net, cfg, stage). Raises CheckpointError on any mismatch."""
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    try:
        meta = json.loads(meta_path.read_text())
        cfg = config_from_dict(meta["config"])
        stage = int(meta["stage"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata {meta_path}: {exc}") from exc
    if expect_stage is not None and stage < expect_stage:
        raise CheckpointError(f"{path} is a stage-{stage} checkpoint; stage {expect_stage} required")
    state = load_weights(path)
    net = StereoSpoofNet(cfg)
    own = dict(net.named_parameters())
    if stage == 1:
        own = {k: v for k, v in own.items() if not k.startswith("cmg.")}
    if set(state) != set(own):
        missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, value in state.items():
        if value.shape != own[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {value.shape}, model expects {own[name].shape}")
        own[name].data = value.copy()
    return net, cfg, stage


# ------------------------------------------------------------------ helpers
class CsvLog:
    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self.columns = list(columns)
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(self.columns)

    def write(self, row: Dict[str, float]) -> None:
        if self.fh is not None:
            self.writer.writerow([row[c] for c in self.columns])

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _views(data: StereoDataset, idx) -> tuple:
    v = data.views[idx]
    return Tensor(v[:, 0]), Tensor(v[:, 1])


def _balanced_batches(labels: np.ndarray, batch: int, rng: np.random.Generator):
    """Endless stream of index batches with both classes equally represented."""
    pools = [np.flatnonzero(labels == c) for c in (0, 1)]
    if min(len(p) for p in pools) == 0:
        raise ValueError("training split must contain both classes")
    half = [batch // 2, batch - batch // 2]
    queues = [rng.permutation(p) for p in pools]
    pos = [0, 0]
    while True:
        out = []
        for c in (0, 1):
            if pos[c] + half[c] > len(queues[c]):
                queues[c], pos[c] = rng.permutation(pools[c]), 0
            out.append(queues[c][pos[c] : pos[c] + half[c]])
            pos[c] += half[c]
        yield rng.permutation(np.concatenate(out))


def stage1_losses(net: StereoSpoofNet, left: Tensor, right: Tensor, teacher: np.ndarray,
                  pairs: Sequence[np.ndarray], weights: Dict[str, float]) -> L.LossBundle:
    out = net.disparity(left, right)
    terms = {
        "L_w": L.weighted_relative_disparity_loss(out.refined, pairs, teacher, reduction="mean"),
        "L_r": L.reconstruction_loss(left, L.reconstruct_left(right, out.pixels)),
        "L_s": L.disparity_smooth_loss(out.refined, left, reduction="mean"),
    }
    return L.LossBundle(terms, weights)


def stage2_losses(net: StereoSpoofNet, refined: Tensor, left: Tensor, teacher: np.ndarray,
                  labels: np.ndarray, weights: Dict[str, float], margin: float) -> L.LossBundle:
    out = net.classify(refined, left)
    sign = np.where(labels == 1, 1.0, -1.0).astype(left.dtype)
    p_true = F.sigmoid(F.mul(out.score_logit(), sign))
    is_real = (labels == 1)[:, None, None]
    real_c, attack_c = out.confidence[:, REAL], out.confidence[:, ATTACK]
    c_true = F.where(np.broadcast_to(is_real, real_c.shape), real_c, attack_c)
    c_other = F.where(np.broadcast_to(is_real, real_c.shape), attack_c, real_c)
    focal_map = L.focal_confidence_map_loss(c_true, teacher, p_true, reduction="mean") + \
        L.focal_confidence_map_loss(c_other, 1.0 - teacher, p_true, reduction="mean")
    terms = {
        "L_f": focal_map,
        "L_t": F.mul(L.confidence_map_triplet_loss(out.features, labels, margin), 1.0 / len(labels)),
        "L_cls": L.focal_classification_loss(out.score_logit(), labels),
    }
    return L.LossBundle(terms, weights)


# ------------------------------------------------------------------ training loops
def train_stage1(net: StereoSpoofNet, data: StereoDataset, cfg: TrainConfig, log_path: Optional[Path] = None,
                 on_step: Optional[Callable[[int, Dict[str, float]], None]] = None) -> List[Dict[str, float]]:
    """Optimise the disparity network; returns per-step loss records (step 0 = before any update)."""
    sc = cfg.stage1
    weights = cfg.loss_weights(1)
    params = net.disparity_parameters()
    opt = Adam(params, lr=sc.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    batches = _balanced_batches(data.labels, sc.batch_size, rng)
    history = []
    csv_log = CsvLog(log_path, ["step", *STAGE1_LOSSES, "total", "seconds"])
    t0 = time.time()
    try:
        for step in range(sc.steps + 1):
            idx = next(batches)
            left, right = _views(data, idx)
            teacher = data.teacher[idx]
            pairs = [sample_rel_pairs(t, sc.n_pairs, sc.tau, seed=int(rng.integers(2**31))) for t in teacher]
            bundle = stage1_losses(net, left, right, teacher, pairs, weights)
            total = bundle.total()
            row = {"step": step, **bundle.values(), "total": float(total.data), "seconds": round(time.time() - t0, 3)}
            if not np.isfinite(row["total"]):
                raise FloatingPointError(f"stage-1 loss diverged at step {step}: {row}")
            history.append(row)
            csv_log.write(row)
            if on_step:
                on_step(step, row)
            if step == sc.steps:
                break  # the last row evaluates the final weights
            opt.zero_grad()
            total.backward()
            opt.step()
    finally:
        csv_log.close()
    return history


def _frozen_refined(net: StereoSpoofNet, data: StereoDataset, batch: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(data), batch):
            left, right = _views(data, slice(start, start + batch))
            out.append(net.disparity(left, right).refined.data)
    return np.concatenate(out, axis=0)


def train_stage2(net: StereoSpoofNet, data: StereoDataset, cfg: TrainConfig, log_path: Optional[Path] = None,
                 on_step: Optional[Callable[[int, Dict[str, float]], None]] = None) -> List[Dict[str, float]]:
    """Optimise the confidence map generator with the disparity network frozen."""
    sc = cfg.stage2
    weights = cfg.loss_weights(2)
    # stage-1 weights never change here, so its outputs are computed once
    refined_all = _frozen_refined(net, data)
    opt = Adam(net.cmg.parameters(), lr=sc.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    batches = _balanced_batches(data.labels, sc.batch_size, rng)
    history = []
    csv_log = CsvLog(log_path, ["step", *STAGE2_LOSSES, "total", "seconds"])
    t0 = time.time()
    try:
        for step in range(sc.steps + 1):
            idx = next(batches)
            left = Tensor(data.views[idx, 0])
            refined = Tensor(refined_all[idx])
            bundle = stage2_losses(net, refined, left, data.teacher[idx], data.labels[idx], weights, sc.margin)
            total = bundle.total()
            row = {"step": step, **bundle.values(), "total": float(total.data), "seconds": round(time.time() - t0, 3)}
            if not np.isfinite(row["total"]):
                raise FloatingPointError(f"stage-2 loss diverged at step {step}: {row}")
            history.append(row)
            csv_log.write(row)
            if on_step:
                on_step(step, row)
            if step == sc.steps:
                break
            opt.zero_grad()
            total.backward()
            opt.step()
    finally:
        csv_log.close()
    return history


# ------------------------------------------------------------------ inference
@dataclass
class Predictions:
    scores: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, H, W) pixel-scale disparity
    refined: np.ndarray  # (N, H, W)
    confidence: np.ndarray  # (N, 2, H, W)


def predict(net: StereoSpoofNet, views: np.ndarray, batch: int = 32) -> Predictions:
    """Scores and maps for (N, 2, H, W) left/right stacks."""
    scores, pixels, refined, conf = [], [], [], []
    with no_grad():
        for start in range(0, len(views), batch):
            v = views[start : start + batch]
            left, right = Tensor(v[:, 0]), Tensor(v[:, 1])
            d = net.disparity(left, right)
            c = net.classify(d.refined, left)
            scores.append(c.score)
            pixels.append(d.pixels.data)
            refined.append(d.refined.data)
            conf.append(c.confidence.data)
    return Predictions(*(np.concatenate(x, axis=0) for x in (scores, pixels, refined, conf)))


def probe_residuals(maps: np.ndarray) -> np.ndarray:
    return np.array([metrics.planarity_probe(m) for m in maps])


def evaluate(net: StereoSpoofNet, data: StereoDataset, fpr_targets: Sequence[float], out_dir: Optional[Path] = None,
             dump_maps: Optional[Path] = None, threshold: float = 0.5) -> Dict[str, object]:
    pred = predict(net, data.views)
    rep = metrics.report(pred.scores, data.labels, fpr_targets, threshold)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(rep, indent=2))
        metrics.export_roc(out_dir / "roc.csv", pred.scores, data.labels)
        metrics.export_histogram(out_dir / "histogram.csv", pred.scores, data.labels)
    if dump_maps is not None:
        dump_maps.mkdir(parents=True, exist_ok=True)
        residuals = probe_residuals(pred.pixels)
        with open(dump_maps / "samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "score", "planarity"])
            for i, sid in enumerate(data.ids):
                write_dsp(dump_maps / f"{sid}_disparity.dsp", pred.refined[i])
                write_dsp(dump_maps / f"{sid}_disparity_px.dsp", pred.pixels[i])
                write_dsp(dump_maps / f"{sid}_conf_real.dsp", pred.confidence[i, REAL])
                write_dsp(dump_maps / f"{sid}_conf_attack.dsp", pred.confidence[i, ATTACK])
                writer.writerow([i, int(data.labels[i]), float(pred.scores[i]), float(residuals[i])])
    return rep


# ------------------------------------------------------------------ file-level runs
def run_stage1(cfg: TrainConfig) -> Path:
    data = load_split(cfg.data.manifest, "train")
    out = Path(cfg.data.out_dir)
    net = StereoSpoofNet(cfg)
    hist = train_stage1(net, data, cfg, out / "stage1_log.csv")
    ckpt = out / "stage1.ifw"
    save_model(ckpt, net, cfg, stage=1)
    log.info("stage 1 done: loss %.4f -> %.4f, %s", hist[0]["total"], hist[-1]["total"], ckpt)
    return ckpt


def run_stage2(cfg: TrainConfig, init_ckpt) -> Path:
    data = load_split(cfg.data.manifest, "train")
    net_init, init_cfg, _ = load_model(init_ckpt, expect_stage=1)
    if init_cfg.dma_config() != cfg.dma_config() or init_cfg.model != cfg.model:
        raise CheckpointError(f"{init_ckpt} was trained with a different model configuration")
    net = StereoSpoofNet(cfg)
    for mod, src in zip(net.disparity_modules(), net_init.disparity_modules()):
        mod.load_state_dict(src.state_dict())
    out = Path(cfg.data.out_dir)
    hist = train_stage2(net, data, cfg, out / "stage2_log.csv")
    ckpt = out / "stage2.ifw"
    save_model(ckpt, net, cfg, stage=2)
    log.info("stage 2 done: loss %.4f -> %.4f, %s", hist[0]["total"], hist[-1]["total"], ckpt)
    return ckpt
