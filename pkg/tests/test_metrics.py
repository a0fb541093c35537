import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereofas import metrics as M

TARGETS = (0.0, 0.01, 0.1, 0.25, 1 / 3, 0.5, 1.0)


# ---------------------------------------------------------------- brute-force oracles
def bf_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def bf_operating_points(s, y):
    """(fpr, tpr) for every threshold 'predict positive iff score >= t', t descending."""
    n_pos, n_neg = sum(y), len(y) - sum(y)
    points = []
    for t in [np.inf] + sorted(set(s), reverse=True):
        tp = sum(1 for a, l in zip(s, y) if l == 1 and a >= t)
        fp = sum(1 for a, l in zip(s, y) if l == 0 and a >= t)
        points.append((fp / n_neg, tp / n_pos))
    return points


def bf_tpr(s, y, target):
    return max(tpr for fpr, tpr in bf_operating_points(s, y) if fpr <= target + 1e-12)


def bf_eer(s, y):
    pts = bf_operating_points(s, y)
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        g0, g1 = (1 - t0) - f0, (1 - t1) - f1
        if g0 > 0 >= g1:
            u = g0 / (g0 - g1)
            return f0 + u * (f1 - f0)
    raise AssertionError("no crossing")


def check_all(s, y):
    s = np.asarray(s, dtype=float)
    y = np.asarray(y)
    assert M.auc(s, y) == pytest.approx(bf_auc(s.tolist(), y.tolist()), abs=1e-12)
    assert M.eer(s, y) == pytest.approx(bf_eer(s.tolist(), y.tolist()), abs=1e-12)
    got = M.tpr_at_fpr(s, y, TARGETS)
    want = [bf_tpr(s.tolist(), y.tolist(), t) for t in TARGETS]
    assert got == pytest.approx(want, abs=1e-12)


def label_patterns(n):
    for bits in itertools.product((0, 1), repeat=n):
        if 0 < sum(bits) < n:
            yield list(bits)


def compositions(n):
    """Every way to cut n ranked positions into consecutive tie groups."""
    for cuts in itertools.product((False, True), repeat=n - 1):
        groups, level = [], 0
        for c in (True,) + cuts:
            level += c
            groups.append(level)
        yield groups


# ---------------------------------------------------------------- exhaustive / random
@pytest.mark.parametrize("n", range(2, 13))
def test_exhaustive_distinct_scores(n):
    # metrics depend only on the label order of the ranked scores
    scores = np.linspace(0.05, 0.95, n)
    for y in label_patterns(n):
        check_all(scores, y)


@pytest.mark.parametrize("n", range(2, 8))
def test_exhaustive_with_ties(n):
    for groups in compositions(n):
        scores = np.array(groups, dtype=float) / (n + 1)
        for y in label_patterns(n):
            check_all(scores, y)


def test_random_larger_sets():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(13, 120))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.random(n)
        if rng.random() < 0.5:
            s = np.round(s * rng.integers(3, 20)) / 20  # heavy ties
        check_all(s, y)


# ---------------------------------------------------------------- examples
SMALL = ([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])


def test_auc_examples():
    assert M.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert M.auc(*SMALL) == 0.75
    assert M.auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_eer_examples():
    assert M.eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0
    assert M.eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 1.0
    # one false accept and one false reject at the crossing, out of two per class
    assert M.eer(*SMALL) == 0.5


def test_tpr_examples():
    assert M.tpr_at_fpr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], [0.001, 0.5]) == [1.0, 1.0]
    # the top score is a negative, and the target is below 1 / #negatives
    assert M.tpr_at_fpr([0.95, 0.9, 0.8, 0.1], [0, 1, 1, 0], [0.1]) == [0.0]


@pytest.mark.parametrize("fn", [M.auc, M.eer, lambda s, y: M.tpr_at_fpr(s, y, [0.1])])
def test_single_class_rejected(fn):
    with pytest.raises(ValueError, match="both classes"):
        fn([0.1, 0.7], [1, 1])


def test_input_validation():
    with pytest.raises(ValueError):
        M.auc([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        M.auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        M.acc([], [])


def test_acc_threshold_tie_counts_as_positive():
    assert M.acc([0.5, 0.4], [1, 0], threshold=0.5) == 1.0
    assert M.acc([0.9, 0.1, 0.6], [1, 0, 0]) == pytest.approx(2 / 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_metric_properties(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    a = M.auc(s, y)
    # rank-only recomputation: replacing scores by their dense ranks leaves AUC unchanged
    ranks = np.unique(s, return_inverse=True)[1].astype(float)
    assert M.auc(ranks, y) == pytest.approx(a, abs=1e-12)
    assert M.auc(-s, 1 - y) == pytest.approx(a, abs=1e-12)
    assert 0 <= M.eer(s, y) <= 1
    tprs = M.tpr_at_fpr(s, y, sorted(TARGETS))
    assert all(b >= a for a, b in zip(tprs, tprs[1:]))


# ---------------------------------------------------------------- exports
def test_roc_csv_endpoints(tmp_path):
    path = tmp_path / "roc.csv"
    M.export_roc(path, *SMALL)
    header, rows = M.read_csv(path)
    assert header == ["fpr", "tpr"]
    assert rows[0].tolist() == [0.0, 0.0] and rows[-1].tolist() == [1.0, 1.0]


def test_histogram_counts_conserve_class_sizes(tmp_path):
    rng = np.random.default_rng(0)
    s, y = rng.random(50), rng.integers(0, 2, 50)
    path = tmp_path / "hist.csv"
    M.export_histogram(path, s, y, bins=7)
    header, rows = M.read_csv(path)
    assert header == ["bin_lo", "bin_hi", "count_real", "count_attack"]
    assert len(rows) == 7
    assert rows[:, 2].sum() == (y == 1).sum() and rows[:, 3].sum() == (y == 0).sum()


def test_report_schema():
    rep = M.report(*SMALL, fpr_targets=[0.01, 0.005, 0.001])
    assert set(rep) == {"acc", "auc", "eer", "tpr"}
    assert set(rep["tpr"]) == {"0.01", "0.005", "0.001"}


# ---------------------------------------------------------------- planarity probe
def test_exact_plane_has_zero_residual():
    ys, xs = np.mgrid[:10, :12]
    assert M.planarity_probe(0.3 + 0.1 * xs - 0.05 * ys) < 1e-12


def test_outlier_residual_matches_direct_fit():
    ys, xs = np.mgrid[:8, :8]
    d = 1.0 + 0.2 * xs + 0.1 * ys
    h = 2.0
    d[3, 5] += h
    # direct normal-equation solution as the oracle
    A = np.column_stack([np.ones(64), xs.ravel(), ys.ravel()])
    coef = np.linalg.solve(A.T @ A, A.T @ d.ravel())
    resid = d.ravel() - A @ coef
    leverage = (A @ np.linalg.inv(A.T @ A) @ A.T)[3 * 8 + 5, 3 * 8 + 5]
    probe = M.planarity_probe(d)
    assert probe == pytest.approx(np.abs(resid).max(), abs=1e-12)
    assert probe >= h * (1 - leverage) - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 1000))
def test_probe_ignores_added_planes(a, b, c, seed):
    d = np.random.default_rng(seed).normal(size=(6, 7))
    ys, xs = np.mgrid[:6, :7]
    assert M.planarity_probe(d + a + b * xs + c * ys) == pytest.approx(M.planarity_probe(d), abs=1e-9)


def test_probe_with_mask():
    ys, xs = np.mgrid[:6, :6]
    d = 0.5 * xs.astype(float)
    d[0, 0] = 50.0
    mask = np.ones((6, 6), bool)
    mask[0, 0] = False
    assert M.planarity_probe(d, mask) < 1e-12
