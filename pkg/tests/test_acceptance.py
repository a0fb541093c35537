"""Acceptance suite: one marked group of checks per criterion, summarised at the end of the run.

The end-to-end groups (5, 6, 7) train four models at desk defaults and take roughly half an hour
on one core. Select them with ``-m slow`` or skip them with ``-m "not slow"``.
"""

import json
import math
import time
from collections import OrderedDict

import numpy as np
import pytest

from stereofas import losses as L
from stereofas import metrics as M
from stereofas.autodiff import Tensor, check_gradients, functional as F, no_grad, precision
from stereofas.config import config_from_dict
from stereofas.data import SceneParams, generate_scene
from stereofas.data.synth import generate_dataset, load_split
from stereofas.models import DmaConfig, DMATransformer, FeatureExtractor, MultiScaleAttention, TokenDown, TokenUp
from stereofas.models import attention_to_raw_disparity
from stereofas.models.cmg import ConfidenceMapGenerator
from stereofas.models.dma import HeadProjection
from stereofas.training import StereoSpoofNet, load_model, predict, run_stage1, run_stage2, save_model

from test_metrics import check_all, compositions, label_patterns
from test_models import loop_raw_disparity

N_INSTANCES = 20
GRAD_TOL = 1e-4
ANCHOR_TOL = 1e-6


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ================================================================ 1. gradient suite
def grad_projection(r):
    proj = HeadProjection(8, 4, r)
    x = t64(r.normal(size=(2, 3, 8)))
    w = t64(r.normal(size=(2, 3, 8)), False)
    return check_gradients(lambda: F.sum(F.mul(proj(x), w)), [x, proj.weight, proj.bias])


def grad_attention(r):
    attn = MultiScaleAttention(4, 2, r)
    xq, xk = t64(r.normal(size=(1, 4, 2, 4))), t64(r.normal(size=(1, 4, 2, 4)))
    res = (t64(r.random((1, 2, 2, 4, 4))), t64(r.random((1, 2, 1, 2, 2))))
    w = t64(r.normal(size=(1, 2, 4, 4)), False)
    mask = [None, "left", "right"][int(r.integers(3))]

    def fn():
        vo, (a1, a2) = attn(xq, xk, residual=res, mask=mask)
        return F.sum(F.mul(vo, w)) + F.sum(F.mul(a1, a1)) + F.sum(a2 * 0.5)

    params = [attn.q_proj.weight, attn.k_proj.bias, attn.q_dw[0].weight, attn.v_dw[1].weight, attn.out.weight]
    return check_gradients(fn, [xq, xk, *res, *params], max_entries=12, rng=r)


def grad_warp(r):
    img = t64(r.random((1, 4, 10)))
    # sample positions stay off integer grid points and inside the image
    d = t64(r.uniform(0.1, 0.9, size=(1, 4, 10)) + r.integers(0, 3, size=(1, 4, 10)))
    d.data[..., :4] = r.uniform(0.1, 0.4, size=(1, 4, 4))
    w = t64(r.normal(size=(1, 4, 10)), False)
    return check_gradients(lambda: (L.reconstruct_left(img, d) * w).sum(), [img, d], eps=1e-6)


def grad_relative(r):
    d = t64(r.normal(size=(2, 5, 5)))
    teacher = r.random((2, 5, 5))
    pairs = [np.column_stack([r.integers(0, 5, size=(6, 4)), r.integers(-1, 2, size=6)]) for _ in range(2)]
    return check_gradients(lambda: L.weighted_relative_disparity_loss(d, pairs, teacher), [d])


def grad_reconstruction(r):
    a = t64(r.random((1, 9, 9)))
    b = t64(r.random((1, 9, 9)) * 0.5 + a.data * 0.5)
    return check_gradients(lambda: L.reconstruction_loss(a, b), [a, b])


def grad_smooth(r):
    d, img = t64(r.random((1, 6, 6))), t64(r.random((1, 6, 6)))
    return check_gradients(lambda: L.disparity_smooth_loss(d, img), [d, img])


def grad_focal_map(r):
    c, p = t64(r.random((2, 4, 4))), t64(r.random(2))
    teacher = r.random((2, 4, 4))
    return check_gradients(lambda: L.focal_confidence_map_loss(c, teacher, p), [c, p])


def grad_triplet(r):
    f = t64(r.normal(size=(6, 4)) * 0.3)
    labels = np.array([0, 0, 0, 1, 1, 1])
    return check_gradients(lambda: L.confidence_map_triplet_loss(f, labels, margin=1.0), [f], eps=1e-6)


def grad_focal_cls(r):
    z = t64(r.normal(size=8) * 2)
    y = r.integers(0, 2, size=8)
    return check_gradients(lambda: L.focal_classification_loss(z, y), [z])


GRADIENT_CASES = OrderedDict(
    projection=grad_projection,
    attention=grad_attention,
    warp=grad_warp,
    relative_disparity=grad_relative,
    reconstruction=grad_reconstruction,
    smoothness=grad_smooth,
    focal_map=grad_focal_map,
    triplet=grad_triplet,
    focal_classification=grad_focal_cls,
)


@pytest.mark.acceptance(1, "finite-difference gradients, 64-bit, rel. error < 1e-4, under 2 min")
def test_gradient_suite():
    start = time.process_time()
    worst = {}
    with precision(np.float64):
        for name, case in GRADIENT_CASES.items():
            errs = [case(np.random.default_rng([1, i])) for i in range(N_INSTANCES)]
            worst[name] = max(errs)
    elapsed = time.process_time() - start
    print(f"worst relative errors: {json.dumps(worst)}; cpu {elapsed:.1f}s")
    assert all(e < GRAD_TOL for e in worst.values()), worst
    assert elapsed < 120


# ================================================================ 2. formula oracles
def random_volume(r):
    w = int(r.choice([4, 8, 16]))
    logits = r.normal(size=(1, 2, w, w)) * r.choice([0.1, 1.0, 5.0])
    if r.random() < 0.2:
        logits = np.round(logits)  # provoke ties
    a = np.exp(logits - logits.max(-1, keepdims=True))
    return (a / a.sum(-1, keepdims=True)).astype(np.float32)


@pytest.mark.acceptance(2, "raw disparity bitwise vs loop; AUC/EER/TPR vs brute force, under 1 min")
def test_formula_oracles():
    start = time.process_time()
    r = np.random.default_rng(77)
    for _ in range(1000):
        a = random_volume(r)
        assert np.array_equal(attention_to_raw_disparity(Tensor(a)).data, loop_raw_disparity(a))
    for n in range(2, 13):
        scores = np.linspace(0.05, 0.95, n)
        for y in label_patterns(n):
            check_all(scores, y)
    for n in range(2, 8):
        for groups in compositions(n):
            for y in label_patterns(n):
                check_all(np.array(groups, dtype=float) / (n + 1), y)
    for _ in range(200):
        n = int(r.integers(13, 120))
        y = r.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = r.random(n)
        if r.random() < 0.5:
            s = np.round(s * r.integers(3, 20)) / 20
        check_all(s, y)
    elapsed = time.process_time() - start
    print(f"cpu {elapsed:.1f}s")
    assert elapsed < 60


# ================================================================ 3. loss anchors
def anchor_values():
    with precision(np.float64):
        l_w = L.weighted_relative_disparity_loss(t64(np.zeros((2, 2)), False), np.array([[0, 0, 1, 1, 1]]),
                                                 np.full((2, 2), 0.3))
        l_r = L.reconstruction_loss(t64(np.zeros((8, 8)), False), t64(np.ones((8, 8)), False))
        s, g = 0.5, 0.5
        d = np.zeros((1, 6))
        d[:, 3:] = s
        smooth_d = L.disparity_smooth_loss(t64(d, False), t64(np.full((1, 6), 0.7), False))
        img = np.zeros((6, 1))
        img[2:] = g
        smooth_g = L.disparity_smooth_loss(t64(np.full((6, 1), 0.3), False), t64(img, False))
        c = np.zeros((2, 2))
        c[0, 0] = 0.5
        focal_hi = L.focal_confidence_map_loss(t64(c, False), np.zeros((2, 2)), 1.0)
        focal_lo = L.focal_confidence_map_loss(t64(c, False), np.zeros((2, 2)), 0.0)
        m = 0.3
        trip = L.confidence_map_triplet_loss(t64([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], False), [0, 0, 1], margin=m)
    c1 = L.SSIM_C1
    return [
        ("relative, equal depths", float(l_w.data), math.log(2)),
        ("reconstruction, constant images", float(l_r.data), 0.15 + 0.85 * (1 - c1 / (1 + c1))),
        ("smooth, disparity step", float(smooth_d.data), 0.2 * s),
        ("smooth, image step", float(smooth_g.data), 0.8 * g),
        ("focal map, confident", float(focal_hi.data), 0.25),
        ("focal map, unconfident", float(focal_lo.data), math.e * 0.25),
        ("triplet, margin case", float(trip.data), m),
    ]


@pytest.mark.acceptance(3, "hand-evaluated loss anchors to 1e-6")
@pytest.mark.parametrize("idx", range(7))
def test_loss_anchor(idx):
    name, got, want = anchor_values()[idx]
    print(f"{name}: {got!r} vs {want!r}")
    assert abs(got - want) < ANCHOR_TOL


@pytest.mark.acceptance(3, "hand-evaluated loss anchors to 1e-6")
def test_rounded_anchor_values():
    values = {name: got for name, got, _ in anchor_values()}
    assert abs(values["reconstruction, constant images"] - 0.99992) < 1e-5
    assert abs(values["focal map, unconfident"] - 0.6796) < 1e-4


# ================================================================ 4. structural invariants
@pytest.mark.acceptance(4, "attention rows, final mask, resampling shapes, confidence shape, checkpoint bytes")
@pytest.mark.parametrize("mask", [None, "left", "right"])
def test_attention_rows_sum_to_one(mask):
    for seed in range(20):
        r = np.random.default_rng(seed)
        attn = MultiScaleAttention(8, 2, r)
        x = Tensor(r.normal(size=(1, 8, 2, 8)) * 3)
        _, (a1, a2) = attn(x, Tensor(r.normal(size=(1, 8, 2, 8))), mask=mask)
        assert np.abs(a1.data.sum(-1) - 1).max() <= 1e-6
        assert np.abs(a2.data.sum(-1) - 1).max() <= 1e-6


@pytest.mark.acceptance(4, "attention rows, final mask, resampling shapes, confidence shape, checkpoint bytes")
@pytest.mark.parametrize("cfg", [DmaConfig(), DmaConfig(split_heads=False), DmaConfig(down_after=(), up_after=())])
def test_final_cross_mask(cfg):
    r = np.random.default_rng(3)
    fe, dma = FeatureExtractor(r), DMATransformer(cfg, r)
    with no_grad():
        vol = dma(*fe(Tensor(r.random((2, 64, 64))), Tensor(r.random((2, 64, 64))))).data
    upper = np.triu(np.ones((16, 16), bool), 1)  # x_r > x_l
    assert (vol[..., upper] == 0).all()
    assert np.abs(vol.sum(-1) - 1).max() <= 1e-6


@pytest.mark.acceptance(4, "attention rows, final mask, resampling shapes, confidence shape, checkpoint bytes")
@pytest.mark.parametrize("shape", [(1, 32, 16, 16), (2, 16, 8, 4), (1, 8, 2, 2)])
def test_token_resampling_round_trip(shape):
    c = shape[1]
    x = Tensor(np.random.default_rng(0).normal(size=shape))
    down = TokenDown(c, np.random.default_rng(1))(x)
    assert down.shape == (shape[0], 2 * c, shape[2] // 2, shape[3] // 2)
    assert TokenUp(2 * c, np.random.default_rng(2))(down).shape == shape


@pytest.mark.acceptance(4, "attention rows, final mask, resampling shapes, confidence shape, checkpoint bytes")
@pytest.mark.parametrize("size", [(32, 32), (64, 64), (64, 96)])
def test_confidence_map_shape(size):
    r = np.random.default_rng(0)
    d, left = Tensor(r.random((3, *size))), Tensor(r.random((3, *size)))
    out = ConfidenceMapGenerator(r)(d, left)
    assert out.confidence.shape == (3, 2, *size)


@pytest.mark.acceptance(4, "attention rows, final mask, resampling shapes, confidence shape, checkpoint bytes")
def test_checkpoint_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 5})
    net = StereoSpoofNet(cfg)
    save_model(tmp_path / "a.ifw", net, cfg, stage=2)
    back, back_cfg, _ = load_model(tmp_path / "a.ifw")
    assert back_cfg == cfg
    original, loaded = net.state_dict(), back.state_dict()
    assert list(original) == list(loaded)
    for k in original:
        assert original[k].tobytes() == loaded[k].tobytes() and original[k].shape == loaded[k].shape
    save_model(tmp_path / "b.ifw", back, back_cfg, stage=2)
    assert (tmp_path / "a.ifw").read_bytes() == (tmp_path / "b.ifw").read_bytes()


# ================================================================ 5-7. desk-scale experiments
E2E_BUDGET = 30 * 60
PROBE_RATIO = 3.0


def train_and_score(root, manifest, name, overrides=None):
    payload = {"data": {"manifest": str(manifest), "out_dir": str(root / name)}, "seed": 0}
    payload.update(overrides or {})
    cfg = config_from_dict(payload)
    stage2 = run_stage2(cfg, run_stage1(cfg))
    net, _, _ = load_model(stage2, expect_stage=2)
    test = load_split(manifest, "test")
    return net, test, predict(net, test.views)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    manifest = generate_dataset(root / "data", 400, 200, 64, 64, seed=0)
    net, test, pred = train_and_score(root, manifest, "full")
    elapsed = time.perf_counter() - start
    return {"root": root, "manifest": manifest, "test": test, "pred": pred, "seconds": elapsed}


@pytest.mark.slow
@pytest.mark.acceptance(5, "end-to-end 400/200 at 64x64: AUC >= 0.95, EER <= 5%, ACC >= 90%, <= 30 min")
def test_end_to_end(desk):
    y, s = desk["test"].labels, desk["pred"].scores
    rep = M.report(s, y, [0.01, 0.005, 0.001])
    print(f"{json.dumps(rep)}; wall {desk['seconds']:.0f}s")
    assert rep["auc"] >= 0.95
    assert rep["eer"] <= 0.05
    assert rep["acc"] >= 0.90
    assert desk["seconds"] <= E2E_BUDGET


@pytest.mark.slow
@pytest.mark.acceptance(6, "median planarity residual, real >= 3x attack")
def test_planarity_probe(desk):
    y = desk["test"].labels
    resid = np.array([M.planarity_probe(m) for m in desk["pred"].pixels])
    real, attack = np.median(resid[y == 1]), np.median(resid[y == 0])
    print(f"median residual real {real:.4f} attack {attack:.4f} ratio {real / attack:.2f}")
    assert real >= PROBE_RATIO * attack


ABLATIONS = {
    "no_relative_loss": {"ablation": {"disable_losses": ["L_w"]}},
    "no_head_split": {"ablation": {"no_head_split": True}},
    "no_resampling": {"ablation": {"no_token_resampling": True}},
}


@pytest.mark.slow
@pytest.mark.acceptance(7, "each ablation's held-out AUC <= full model's")
@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_direction(desk, name):
    y = desk["test"].labels
    full_auc = M.auc(desk["pred"].scores, y)
    _, _, pred = train_and_score(desk["root"], desk["manifest"], name, ABLATIONS[name])
    ablated_auc = M.auc(pred.scores, y)
    print(f"{name}: auc {ablated_auc:.4f} vs full {full_auc:.4f}")
    assert ablated_auc <= full_auc


# ================================================================ 8. warp fidelity
@pytest.mark.acceptance(8, "ground-truth warp SSIM >= 0.95 on noiseless scenes")
@pytest.mark.parametrize("illum", ["dim", "normal", "bright"])
@pytest.mark.parametrize("dist", ["far", "mid", "near"])
@pytest.mark.parametrize("label", [0, 1])
def test_ground_truth_warp(illum, dist, label):
    for seed in range(5):
        s = generate_scene(seed, SceneParams(label=label, illum=illum, dist=dist, noise_level=0.0))
        with precision(np.float64):
            left_hat = L.reconstruct_left(t64(s.right, False), t64(s.gt_disparity, False))
            sim = float(L.ssim(t64(s.left, False), left_hat).data[0])
        assert sim >= 0.95, (seed, sim)
