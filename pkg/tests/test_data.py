import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereofas import metrics as M
from stereofas.data import (
    HeaderError,
    ManifestError,
    SceneParams,
    ShapeMismatchError,
    TruncationError,
    generate_dataset,
    generate_scene,
    load_split,
    make_teacher_depth,
    read_dsp,
    read_manifest,
    read_pgm,
    read_pgm_bytes,
    sample_rel_pairs,
    scene_for_index,
    write_dsp,
    write_pgm,
)
from stereofas.data.synth import sample_right_at


# ---------------------------------------------------------------- scenes
@pytest.mark.parametrize("seed", range(6))
def test_attack_disparity_is_a_plane(seed):
    s = generate_scene(seed, SceneParams(label=0))
    assert M.planarity_probe(s.gt_disparity) < 1e-3


@pytest.mark.parametrize("seed", range(6))
def test_real_disparity_is_curved(seed):
    s = generate_scene(seed, SceneParams(label=1))
    assert M.planarity_probe(s.gt_disparity) > 1.0


@pytest.mark.parametrize("seed", range(6))
def test_scene_invariants(seed):
    s = generate_scene(seed, SceneParams(label=seed % 2))
    h, w = s.left.shape
    assert s.right.shape == s.gt_disparity.shape == s.teacher_depth.shape == (h, w)
    assert s.left.min() >= 0 and s.left.max() <= 1
    assert (s.gt_disparity >= 0).all()
    xs = np.arange(w)[None, :] - s.gt_disparity
    assert ((xs >= 0) & (xs < w)).all()
    assert s.gt_disparity.max() < w / 8


@pytest.mark.parametrize("seed", range(6))
def test_epipolar_consistency(seed):
    s = generate_scene(seed, SceneParams(label=seed % 2))
    resampled = sample_right_at(s.right.astype(np.float64), s.gt_disparity.astype(np.float64))
    close = np.abs(s.left - resampled) <= 1 / 255 + 1e-6
    assert close.mean() >= 0.95


@pytest.mark.parametrize("size", [(36, 64), (64, 60), (24, 24)])
def test_invalid_sizes_rejected(size):
    with pytest.raises(ValueError):
        generate_scene(0, SceneParams(height=size[0], width=size[1]))


def test_disparity_beyond_window_rejected():
    with pytest.raises(ValueError, match="W/4"):
        generate_scene(0, SceneParams(label=1, bump_amplitude=40.0))


def test_scene_depends_only_on_seed_and_index():
    a = scene_for_index(7, 3)
    _ = scene_for_index(7, 1)
    b = scene_for_index(7, 3)
    assert np.array_equal(a.left, b.left) and np.array_equal(a.gt_disparity, b.gt_disparity)
    assert a.label == 1 and scene_for_index(7, 4).label == 0


def test_illumination_controls_contrast():
    dim = generate_scene(3, SceneParams(illum="dim"))
    bright = generate_scene(3, SceneParams(illum="bright"))
    assert dim.right.std() < bright.right.std()


# ---------------------------------------------------------------- teacher
def test_teacher_fusion_values():
    gt = np.array([[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]])
    fg = np.array([[True, True, True], [False, False, False]])
    t = make_teacher_depth(gt, fg)
    assert t[0, 2] == pytest.approx(0.75)
    assert t[0, 0] == pytest.approx(0.25)
    assert (t[1] == 0).all()


def test_teacher_range():
    for seed in range(4):
        t = generate_scene(seed, SceneParams(label=seed % 2)).teacher_depth
        assert t.min() >= 0 and t.max() <= 1


def test_teacher_empty_foreground():
    with pytest.raises(ValueError, match="empty"):
        make_teacher_depth(np.zeros((4, 4)), np.zeros((4, 4), bool))


# ---------------------------------------------------------------- pairs
def test_constant_teacher_gives_neutral_pairs():
    p = sample_rel_pairs(np.full((8, 8), 0.4), k=100)
    assert (p[:, 4] == 0).all()


def test_pair_label_follows_teacher_order():
    t = np.zeros((1, 2))
    t[0, 1] = 0.3
    p = sample_rel_pairs(t, k=50, tau=0.05)
    for xi, yi, xj, yj, r in p:
        assert r == (1 if t[yj, xj] > t[yi, xi] else -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 64))
def test_pairs_in_bounds_and_distinct(seed, k):
    p = sample_rel_pairs(np.random.default_rng(seed).random((5, 7)), k=k, seed=seed)
    assert p.shape == (k, 5)
    assert ((p[:, 0] >= 0) & (p[:, 0] < 7) & (p[:, 2] >= 0) & (p[:, 2] < 7)).all()
    assert ((p[:, 1] >= 0) & (p[:, 1] < 5) & (p[:, 3] >= 0) & (p[:, 3] < 5)).all()
    assert not ((p[:, 0] == p[:, 2]) & (p[:, 1] == p[:, 3])).any()


def test_neutral_fraction_on_a_ramp():
    h, w, tau = 4, 200, 0.05
    ramp = np.tile(np.linspace(0, 1, w), (h, 1))
    p = sample_rel_pairs(ramp, k=10_000, tau=tau, seed=5)
    frac = (p[:, 4] == 0).mean()
    # continuous limit: P(|u - v| < tau) for independent uniforms
    assert abs(frac - (2 * tau - tau**2)) < 0.02
    # exact discrete value: distinct pixels whose columns differ by at most tau * (w - 1)
    dx = np.abs(np.arange(w)[:, None] - np.arange(w)[None, :])
    same_band = (dx / (w - 1) <= tau).sum() * h * h - h * w  # ordered pixel pairs minus i == j
    exact = same_band / ((h * w) * (h * w - 1))
    assert abs(frac - exact) < 0.01


def test_pair_arguments_validated():
    with pytest.raises(ValueError):
        sample_rel_pairs(np.zeros((4, 4)), k=0)
    with pytest.raises(ValueError):
        sample_rel_pairs(np.zeros((4, 4)), tau=0)


# ---------------------------------------------------------------- file formats
def test_pgm_round_trip_bytes(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 5)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm_bytes(tmp_path / "a.pgm"), img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n255\n") and raw[-35:] == img.tobytes()


def test_pgm_float_values_quantised(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm_bytes(tmp_path / "c.pgm").tolist() == [[0, 255]]


@pytest.mark.parametrize(
    "blob, err",
    [
        (b"P2\n2 1\n255\n\x00\x01", HeaderError),
        (b"P5\n2 1\n65535\n\x00\x01", HeaderError),
        (b"P5\n2 x\n255\n\x00\x01", HeaderError),
        (b"P5\n2 2\n255\n\x00\x01", TruncationError),
    ],
)
def test_pgm_errors(tmp_path, blob, err):
    (tmp_path / "bad.pgm").write_bytes(blob)
    with pytest.raises(err):
        read_pgm_bytes(tmp_path / "bad.pgm")


def test_dsp_round_trip_bytes(tmp_path):
    d = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
    write_dsp(tmp_path / "d.dsp", d)
    raw = (tmp_path / "d.dsp").read_bytes()
    assert raw[:4] == b"DSP1" and raw[4:12] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert np.array_equal(read_dsp(tmp_path / "d.dsp"), d)


def test_dsp_truncated(tmp_path):
    write_dsp(tmp_path / "d.dsp", np.zeros((3, 4)))
    blob = (tmp_path / "d.dsp").read_bytes()
    (tmp_path / "t.dsp").write_bytes(blob[:-4])
    with pytest.raises(TruncationError):
        read_dsp(tmp_path / "t.dsp")


def test_dsp_bad_magic(tmp_path):
    (tmp_path / "m.dsp").write_bytes(b"DSP2" + bytes(8))
    with pytest.raises(HeaderError):
        read_dsp(tmp_path / "m.dsp")


def test_write_rejects_non_2d(tmp_path):
    with pytest.raises(ShapeMismatchError):
        write_dsp(tmp_path / "x.dsp", np.zeros((2, 2, 2)))
    with pytest.raises(ShapeMismatchError):
        write_pgm(tmp_path / "x.pgm", np.zeros(4))


# ---------------------------------------------------------------- manifests
@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_dataset(root, n_train=6, n_test=4, height=32, width=32, seed=3)


def test_manifest_contents(small_dataset):
    recs = read_manifest(small_dataset)
    assert len(recs) == 10
    assert [r.split for r in recs].count("test") == 4
    assert len({r.id for r in recs}) == 10
    first = json.loads(small_dataset.read_text().splitlines()[0])
    assert set(first) == {"id", "left", "right", "disp", "teacher", "label", "split", "illum", "dist"}


def test_generated_files_match_scenes(small_dataset):
    data = load_split(small_dataset, "train")
    s = scene_for_index(3, 2, 32, 32)
    assert np.array_equal(data.views[2, 0], s.left)
    assert np.array_equal(data.gt_disparity[2], s.gt_disparity)
    assert data.labels.tolist() == [0, 1, 0, 1, 0, 1]


def test_missing_file_named(small_dataset, tmp_path):
    lines = small_dataset.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["left"] = "views/nowhere.pgm"
    bad = small_dataset.parent / "bad.jsonl"
    bad.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestError, match="nowhere.pgm"):
        read_manifest(bad)


@pytest.mark.parametrize(
    "patch",
    [{"label": 2}, {"split": "val"}, {"extra": 1}],
)
def test_manifest_validation(small_dataset, patch):
    rec = json.loads(small_dataset.read_text().splitlines()[0])
    rec.update(patch)
    bad = small_dataset.parent / "bad2.jsonl"
    bad.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestError):
        read_manifest(bad)


def test_duplicate_ids(small_dataset):
    line = small_dataset.read_text().splitlines()[0]
    bad = small_dataset.parent / "dup.jsonl"
    bad.write_text(line + "\n" + line + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(bad)


def test_empty_split(small_dataset):
    line = small_dataset.read_text().splitlines()[0]
    only_train = small_dataset.parent / "train_only.jsonl"
    only_train.write_text(line + "\n")
    with pytest.raises(ManifestError):
        load_split(only_train, "test")
