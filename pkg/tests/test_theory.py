import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clid_audit.theory import (
    DiscreteJointDistribution,
    conditional_minus_marginal_kl,
    entropy_gap,
    expected_indicator,
    random_triple,
    verify_theorem_equivalence,
)

from oracles import kl_gap_loops


def test_distribution_validation():
    with pytest.raises(ValueError):
        DiscreteJointDistribution(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        DiscreteJointDistribution(np.array([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        DiscreteJointDistribution(np.array([[1.5, -0.5]]))


def test_marginals_and_entropies():
    q = DiscreteJointDistribution(np.array([[0.25, 0.25], [0.5, 0.0]]))
    np.testing.assert_allclose(q.marginal_x(), [0.5, 0.5])
    np.testing.assert_allclose(q.marginal_c(), [0.75, 0.25])
    assert q.entropy_x() == pytest.approx(np.log(2))
    # column 0 is (1/3, 2/3), column 1 is a point mass
    h0 = -(1 / 3 * np.log(1 / 3) + 2 / 3 * np.log(2 / 3))
    assert q.conditional_entropy_x() == pytest.approx(0.75 * h0)


def test_identical_distributions_give_zero():
    rng = np.random.default_rng(0)
    p = DiscreteJointDistribution.random(rng, 5, 3)
    chk = verify_theorem_equivalence(p, p, p)
    assert abs(chk.form_a) < 1e-12 and abs(chk.form_b) < 1e-12 and chk.equal


def test_indicator_zero_when_x_independent_of_c():
    p = DiscreteJointDistribution(np.outer([0.2, 0.3, 0.5], [0.4, 0.6]))
    q = DiscreteJointDistribution.random(np.random.default_rng(1), 3, 2)
    assert expected_indicator(q, p) == pytest.approx(0.0, abs=1e-12)


def test_support_errors():
    q = DiscreteJointDistribution(np.array([[0.5, 0.5]]))
    p = DiscreteJointDistribution(np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        verify_theorem_equivalence(q, q, p)
    with pytest.raises(ValueError):
        verify_theorem_equivalence(q, DiscreteJointDistribution(np.array([[1.0]])), q)


def test_entropy_gap_shannon_sign():
    rng = np.random.default_rng(3)
    a, b, p = (DiscreteJointDistribution.random(rng, 5, 3) for _ in range(3))
    chk = verify_theorem_equivalence(a, b, p)
    # Shannon form: mutual information of the hold-out grid minus that of the member grid
    mi = lambda q: q.entropy_x() - q.conditional_entropy_x()
    assert abs(mi(b) - mi(a)) > 1e-3
    assert chk.delta_h_shannon == pytest.approx(mi(b) - mi(a), abs=1e-12)
    assert chk.delta_h == -chk.delta_h_shannon
    assert chk.delta_h == entropy_gap(a, b)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_kl_gap_matches_loop_oracle(seed):
    q, _, p = random_triple(np.random.default_rng(seed))
    assert conditional_minus_marginal_kl(q, p) == pytest.approx(kl_gap_loops(q.probs, p.probs), abs=1e-10)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_forms_agree_on_random_triples(seed):
    chk = verify_theorem_equivalence(*random_triple(np.random.default_rng(seed)))
    assert chk.equal
    assert (chk.form_a >= 0) == (chk.form_b >= -1e-9) or abs(chk.form_a) < 1e-9
