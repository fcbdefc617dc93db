import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clid_audit.attacks import (
    RobustScalerParams,
    ThresholdAttackModel,
    baseline_scores,
    clid_th_scores,
    fit_robust_scaler,
    fit_tau,
    fit_threshold_attack,
    score_baseline,
    score_clid_th,
    train_vector_classifier,
    VectorAttackModel,
)
from clid_audit.diffusion import DenoiserNet, make_linear_schedule
from clid_audit.indicator import IndicatorEstimate, MonteCarloPlan
from clid_audit.metrics import compute_roc_auc, decide

from oracles import eps_oracle

SCHED = make_linear_schedule(100, 1e-4, 0.05)


def _est(mean_d, elbo, k=1):
    return IndicatorEstimate(
        discrepancies=np.full(k, float(mean_d)), elbo_proxy=float(elbo), query_count=0,
        timesteps=np.array([1]), err_conditional=np.zeros(1), err_reduced=np.zeros((k, 1)),
    )


def test_scaler_hand_example():
    s = fit_robust_scaler([1, 2, 3, 4, 10])
    assert (s.center, s.iqr) == (4.0, 2.0)
    assert s.transform(3) == -0.5
    med = fit_robust_scaler([1, 2, 3, 4, 10], center="median")
    assert med.center == 3.0


def test_scaler_errors():
    with pytest.raises(ValueError):
        fit_robust_scaler([2.0] * 10)
    with pytest.raises(ValueError):
        fit_robust_scaler([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_robust_scaler([1.0, 2.0, 3.0, np.nan])
    with pytest.raises(ValueError):
        fit_robust_scaler([1.0, 2.0, 3.0, 4.0], center="mode")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scaler_monotone_and_auc_preserved(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(40)
    y = rng.random(40) < 0.5
    y[:2] = [True, False]
    s = fit_robust_scaler(v)
    assert s.transform(s.center) == 0.0
    z = s.transform(v)
    assert np.all(np.argsort(z, kind="stable") == np.argsort(v, kind="stable"))
    assert compute_roc_auc(z, y)[1] == compute_roc_auc(v, y)[1]


def test_score_clid_th_weights():
    unit = RobustScalerParams(0.0, 1.0)
    m = ThresholdAttackModel(0.5, 0.0, unit, unit)
    assert score_clid_th(_est(1.0, -0.5), m) == 0.25
    assert score_clid_th(_est(2.0, 7.0), ThresholdAttackModel(1.0, 0.0, unit, unit)) == 2.0
    assert score_clid_th(_est(2.0, 7.0), ThresholdAttackModel(0.0, 0.0, unit, unit)) == 7.0
    with pytest.raises(ValueError):
        ThresholdAttackModel(1.5, 0.0, unit, unit)


def test_alpha_one_when_discrepancy_separates():
    rng = np.random.default_rng(0)
    y = np.arange(100) < 50
    d = np.where(y, 1.0, -1.0) + 0.1 * rng.standard_normal(100)
    L = rng.standard_normal(100)
    m = fit_threshold_attack([_est(a, b) for a, b in zip(d, L)], y)
    assert m.shadow_auc == 1.0
    # every alpha reaching AUC 1 ties; smaller wins, and it must still separate perfectly
    zD, zL = m.scaler_D.transform(d), m.scaler_L.transform(L)
    assert compute_roc_auc(m.alpha * zD + (1 - m.alpha) * zL, y)[1] == 1.0
    assert compute_roc_auc(zL, y)[1] < 1.0 and m.alpha > 0


def test_alpha_zero_on_identical_features():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(60)
    y = rng.random(60) < 0.5
    m = fit_threshold_attack([_est(a, a) for a in v], y)
    assert m.alpha == 0.0


def test_swapped_labels_flag_orientation():
    rng = np.random.default_rng(2)
    y = np.arange(80) < 40
    d = np.where(y, 1.0, 0.0) + 0.5 * rng.standard_normal(80)
    ests = [_est(a, a) for a in d]
    good = fit_threshold_attack(ests, y)
    bad = fit_threshold_attack(ests, ~y)
    assert good.orientation_ok and not bad.orientation_ok
    assert bad.shadow_auc == pytest.approx(1 - good.shadow_auc, abs=1e-12)
    assert np.mean(decide(clid_th_scores(ests, good), good.tau) == y) > 0.5


def test_threshold_attack_single_label_raises():
    with pytest.raises(ValueError):
        fit_threshold_attack([_est(i, i) for i in range(10)], np.ones(10, bool))


def test_threshold_model_round_trip():
    m = fit_threshold_attack([_est(i, -i * 0.3) for i in range(10)], np.arange(10) >= 5)
    back = ThresholdAttackModel.from_dict(m.to_dict())
    assert back == m


def test_fit_tau_examples():
    assert fit_tau([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == pytest.approx(0.5)
    # all members: predicting everyone member is optimal; tau below the minimum
    assert fit_tau([1.0, 2.0], [True, True]) < 1.0
    assert fit_tau([1.0, 2.0], [False, False]) >= 2.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fit_tau_is_accuracy_optimal(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 8, size=30).astype(float)
    y = rng.random(30) < 0.5
    tau = fit_tau(s, y)
    best = max(np.mean((s > t) == y) for t in np.r_[-np.inf, np.unique(s)])
    assert np.mean(decide(s, tau) == y) == best


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(-3, 3), dt=st.floats(0, 3))
def test_decisions_shrink_as_tau_grows(seed, t1, dt):
    s = np.random.default_rng(seed).standard_normal(50)
    a, b = decide(s, t1), decide(s, t1 + dt)
    assert np.all(b <= a)


def test_vector_attack_separable_and_deterministic():
    x = np.linspace(-1, 1, 60)[:, None]
    y = x[:, 0] > 0.05
    m = train_vector_classifier(list(x), y)
    conf = m.confidence(list(x))
    assert np.all((conf > 0) & (conf < 1))
    assert np.mean(decide(conf, m.tau) == y) == 1.0
    m2 = train_vector_classifier(list(x), y)
    assert np.array_equal(m2.confidence(list(x)), conf)
    back = VectorAttackModel.from_dict(m.to_dict())
    assert np.array_equal(back.confidence(list(x)), conf)


def test_vector_attack_errors():
    with pytest.raises(ValueError):
        train_vector_classifier([np.zeros(2)] * 10, np.ones(10, bool))
    with pytest.raises(ValueError):
        train_vector_classifier([np.zeros(2), np.zeros(3)], [True, False])


def test_baselines_oracle_zero_model_and_queries():
    x0 = np.linspace(-1, 1, 4)
    oracle = eps_oracle(x0, SCHED, 3)
    plan = MonteCarloPlan((40, 41, 42))
    for kind in ("loss", "monte_carlo"):
        assert score_baseline(oracle, SCHED, x0, np.ones(3), kind, plan) == pytest.approx(0.0, abs=1e-20)
    oracle.queries.reset()
    _, q = baseline_scores(oracle, SCHED, np.stack([x0, x0]), np.ones((2, 3)), "loss", plan)
    assert q == 1 and oracle.queries.value == 2
    oracle.queries.reset()
    _, q = baseline_scores(oracle, SCHED, np.stack([x0, x0]), np.ones((2, 3)), "monte_carlo", plan)
    assert q == 3 and oracle.queries.value == 6
    zero = DenoiserNet(4, 3, (4,), zero_output=True)
    xs = np.tile(x0, (5000, 1))
    s, _ = baseline_scores(zero, SCHED, xs, np.ones((5000, 3)), "loss", plan)
    assert abs(s.mean() + 4) < 3 * np.sqrt(8 / 5000)
    with pytest.raises(ValueError):
        baseline_scores(zero, SCHED, xs, np.ones((5000, 3)), "other", plan)


def test_monte_carlo_baseline_equals_elbo_proxy():
    from clid_audit.indicator import estimate_elbo_proxy

    net = DenoiserNet(4, 3, (8,), seed=3)
    plan = MonteCarloPlan((40, 41, 42), noise_seed=5)
    x, c = np.array([0.3, -1.0, 2.0, 0.5]), np.array([1.0, 0.0, -1.0])
    assert score_baseline(net, SCHED, x, c, "monte_carlo", plan, 7) == estimate_elbo_proxy(net, SCHED, x, c, plan, 7)
