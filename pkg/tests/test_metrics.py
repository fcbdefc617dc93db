import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clid_audit.metrics import (
    asr,
    aux_distances,
    compute_roc_auc,
    decide,
    kernel_mmd,
    metrics_report,
    one_nn_accuracy,
    sliced_wasserstein,
    toy_fid,
    tpr_at_fpr,
)

from oracles import pairwise_auc, random_instance, scan_tpr_at_fpr


def test_auc_examples():
    _, auc = compute_roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert auc == 1.0
    roc, auc = compute_roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])
    assert auc == 0.5
    assert roc.fpr.tolist() == [0.0, 1.0] and roc.tpr.tolist() == [0.0, 1.0]


def test_auc_single_label_raises():
    with pytest.raises(ValueError):
        compute_roc_auc([1.0, 2.0], [1, 1])


def test_roc_endpoints_and_monotone():
    rng = np.random.default_rng(0)
    s, y = random_instance(rng, 100)
    roc, _ = compute_roc_auc(s, y)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


def test_roc_csv(tmp_path):
    roc, _ = compute_roc_auc([3.0, 2.0, 1.0], [1, 0, 1])
    roc.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == 5


def test_auc_forty_point_oracle():
    rng = np.random.default_rng(40)
    s = rng.integers(0, 10, size=40).astype(float)
    y = rng.random(40) < 0.5
    assert compute_roc_auc(s, y)[1] == pairwise_auc(s, y)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_auc_equals_mann_whitney(seed):
    s, y = random_instance(np.random.default_rng(seed), 120)
    assert compute_roc_auc(s, y)[1] == pairwise_auc(s, y)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), target=st.sampled_from([0.0, 0.01, 0.05, 0.2, 0.5]))
def test_tpr_at_fpr_equals_scan(seed, target):
    s, y = random_instance(np.random.default_rng(seed), 120)
    roc, _ = compute_roc_auc(s, y)
    assert tpr_at_fpr(roc, target) == scan_tpr_at_fpr(s, y, target)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_label_flip_antisymmetry(seed):
    s, y = random_instance(np.random.default_rng(seed), 80)
    a = compute_roc_auc(s, y)[1]
    b = compute_roc_auc(s, ~y)[1]
    assert a + b == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_monotone_transform_invariance(seed):
    s, y = random_instance(np.random.default_rng(seed), 80)
    r1, a1 = compute_roc_auc(s, y)
    r2, a2 = compute_roc_auc(np.exp(s / 10.0) * 3 + 1, y)
    assert a1 == a2
    assert np.array_equal(r1.fpr, r2.fpr) and np.array_equal(r1.tpr, r2.tpr)
    assert tpr_at_fpr(r1) == tpr_at_fpr(r2)


def test_tpr_examples():
    roc, _ = compute_roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert tpr_at_fpr(roc) == 1.0
    roc, _ = compute_roc_auc(np.zeros(200), np.r_[np.ones(100), np.zeros(100)].astype(bool))
    assert tpr_at_fpr(roc, 0.01) == 0.0


def test_decide_strict():
    assert decide(1.0, 1.0) is False
    assert decide(1.0 + 1e-12, 1.0) is True
    assert decide(np.array([0.0, 2.0]), 1.0).tolist() == [False, True]


def test_asr_examples():
    s, y = [0.9, 0.8, 0.2, 0.1], np.array([1, 1, 0, 0], bool)
    assert asr(s, y, 0.5) == 1.0
    assert asr(s, y, math.inf) == 0.5
    rng = np.random.default_rng(3)
    s, y = random_instance(rng, 50)
    assert asr(s, y, 0.3) == np.mean((s > 0.3) == y)


def test_metrics_report_ranges():
    rng = np.random.default_rng(1)
    s, y = random_instance(rng, 200)
    r = metrics_report("x", s, y, 0.0, 15)
    for v in (r.asr, r.auc, r.tpr_at_1pct_fpr):
        assert 0.0 <= v <= 1.0
    assert r.n_member + r.n_holdout == len(s) and r.query_count == 15


# distances


def test_toy_fid_identical_and_shifted():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((500, 4))
    assert toy_fid(a, a) == pytest.approx(0.0, abs=1e-8)
    d = np.array([1.0, -2.0, 0.5, 0.0])
    assert toy_fid(a, a + d) == pytest.approx(d @ d, abs=1e-6)


def test_toy_fid_one_dimensional_formula():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((400, 1))
    z = (z - z.mean()) / z.std(ddof=1)
    a, b = 2.0 * z, 0.5 * z
    # (sqrt(4 + reg) - sqrt(0.25 + reg))^2, reg = 1e-6
    expected = (math.sqrt(4 + 1e-6) - math.sqrt(0.25 + 1e-6)) ** 2
    assert toy_fid(a, b) == pytest.approx(expected, rel=1e-9)
    assert toy_fid(a, b) == pytest.approx(1.5**2, abs=1e-5)


def test_toy_fid_needs_samples():
    with pytest.raises(ValueError):
        toy_fid(np.zeros((3, 4)), np.zeros((10, 4)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 5))
def test_toy_fid_symmetric_nonnegative(seed, dim):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim + 4, dim)) * rng.uniform(0.1, 3)
    b = rng.standard_normal((dim + 7, dim)) + rng.uniform(-2, 2)
    ab, ba = toy_fid(a, b), toy_fid(b, a)
    assert ab >= 0 and abs(ab - ba) < 1e-8 * max(1.0, ab)


def test_sliced_wasserstein_hand_example():
    assert sliced_wasserstein(np.array([[0.0], [1.0]]), np.array([[10.0], [11.0]])) == 10.0


def test_identical_sets_aux():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((60, 3))
    assert aux_distances(a, a, "sliced_wasserstein") == 0.0
    assert 0.0 <= kernel_mmd(a, a) < 1e-12
    assert kernel_mmd(a, a) <= kernel_mmd(a, a + 0.5)
    assert one_nn_accuracy(a, a) <= 0.5


def test_separated_clouds_one_nn():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((40, 2))
    assert one_nn_accuracy(a, a + 100.0) == 1.0


def test_aux_errors():
    with pytest.raises(ValueError):
        aux_distances(np.zeros((0, 2)), np.zeros((3, 2)), "kernel_mmd")
    with pytest.raises(ValueError):
        aux_distances(np.zeros((3, 2)), np.zeros((3, 2)), "nope")
