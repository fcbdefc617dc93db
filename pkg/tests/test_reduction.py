import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clid_audit.diffusion import DenoiserNet, make_embedder, make_linear_schedule
from clid_audit.indicator import MonteCarloPlan
from clid_audit.reduction import (
    ImportanceProfile,
    ReducedConditionSet,
    build_reductions,
    importance_profiles,
    null_condition,
    reduce_clip,
    reduce_embed_noise,
    reduce_importance,
    token_importance,
)

from oracles import ConditionBlindNet

EMB = make_embedder(32, 16, seed=0)
SCHED = make_linear_schedule(100, 1e-4, 0.05)


def test_null_condition():
    assert null_condition() == ()
    assert np.all(EMB.embed(null_condition()) == 0)


@pytest.mark.parametrize(
    "c, expected",
    [
        ((1, 2, 3), [(1,), (2,), (3,)]),
        ((7,), [(7,), (7,), (7,)]),
        ((1, 2, 3, 4, 5, 6), [(1, 2), (3, 4), (5, 6)]),
        ((1, 2, 3, 4), [(1, 2), (2, 3), (3, 4)]),
    ],
)
def test_clip_thirds(c, expected):
    r = reduce_clip(c)
    assert list(r.entries) == [*expected, ()]
    assert r.k == 4 and r.strategy == "clip"


def test_clip_rejects_empty():
    with pytest.raises(ValueError):
        reduce_clip(())


def test_reduced_set_requires_null_last():
    with pytest.raises(ValueError):
        ReducedConditionSet(((1,),), "clip")
    with pytest.raises(ValueError):
        ReducedConditionSet((), "clip")


def test_embed_noise_scales():
    c = (3, 4, 5)
    r = reduce_embed_noise(c, EMB, [0.0, 1.0], np.random.default_rng(0))
    assert np.array_equal(r.entries[0], EMB.embed(c))
    assert r.k == 3
    # scale 1: pure noise, the value does not depend on the condition's embedding
    other = reduce_embed_noise((9, 10), EMB, [1.0], np.random.default_rng(0))
    e1, e2 = EMB.embed(c), EMB.embed((9, 10))
    mine = reduce_embed_noise(c, EMB, [1.0], np.random.default_rng(0))
    np.testing.assert_allclose(mine.entries[0] / np.std(e1), other.entries[0] / np.std(e2), rtol=1e-12)
    assert reduce_embed_noise(c, EMB, [0.5, 0.7, 0.9], np.random.default_rng(1)).k == 4


def test_embed_noise_deterministic_and_validated():
    a = reduce_embed_noise((3, 4), EMB, [0.5], np.random.default_rng(2))
    b = reduce_embed_noise((3, 4), EMB, [0.5], np.random.default_rng(2))
    assert np.array_equal(a.entries[0], b.entries[0])
    with pytest.raises(ValueError):
        reduce_embed_noise((3,), EMB, [], np.random.default_rng(0))
    with pytest.raises(ValueError):
        reduce_embed_noise((3,), EMB, [1.2], np.random.default_rng(0))


def test_importance_counts_for_ten_tokens():
    c = tuple(range(1, 11))
    prof = ImportanceProfile(np.arange(10, dtype=float))
    r = reduce_importance(c, prof)
    assert [sum(t == 0 for t in e) for e in r.entries[:-1]] == [3, 5, 7]
    # highest scores sit at the end of the sequence
    assert r.entries[0] == (1, 2, 3, 4, 5, 6, 7, 0, 0, 0)


def test_importance_small_examples():
    r = reduce_importance((5, 6), ImportanceProfile(np.array([0.1, 0.9])), [0.5])
    assert r.entries == ((5, 0), ())
    r = reduce_importance((5, 6, 7), ImportanceProfile(np.array([1.0, 3.0, 2.0])), [0.01])
    assert r.entries[0] == (5, 0, 7)
    # ties resolve to the lower index
    r = reduce_importance((5, 6, 7), ImportanceProfile(np.zeros(3)), [0.3])
    assert r.entries[0] == (0, 6, 7)


def test_importance_validation():
    with pytest.raises(ValueError):
        reduce_importance((1, 2), ImportanceProfile(np.zeros(3)))
    with pytest.raises(ValueError):
        reduce_importance((1, 2), ImportanceProfile(np.zeros(2)), [0.7, 0.3])
    with pytest.raises(ValueError):
        reduce_importance((1, 2), ImportanceProfile(np.zeros(2)), [1.0])
    with pytest.raises(ValueError):
        ImportanceProfile(np.array([np.nan]))


@settings(max_examples=100, deadline=None)
@given(
    c=st.lists(st.integers(1, 31), min_size=1, max_size=12),
    props=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4),
    seed=st.integers(0, 1000),
)
def test_reductions_never_longer_and_end_null(c, props, seed):
    props = sorted(props)
    scores = np.random.default_rng(seed).standard_normal(len(c))
    for r in (reduce_clip(c), reduce_importance(c, ImportanceProfile(scores), props)):
        assert r.entries[-1] == ()
        assert all(len(e) <= len(c) for e in r.entries)
    r = reduce_importance(c, ImportanceProfile(scores), props)
    assert r.k == len(props) + 1
    assert all(len(e) == len(c) for e in r.entries[:-1])


def _plan(M=3):
    return MonteCarloPlan((20, 21, 22), M=M, N=M, noise_seed=4)


def test_token_importance_condition_blind_is_zero():
    net = ConditionBlindNet(DenoiserNet(8, 16, (16,), seed=1))
    prof = token_importance(net, SCHED, np.ones(8), (3, 4, 5), _plan(), EMB)
    assert np.all(prof.scores == 0.0)


def test_token_importance_duplicate_tokens_equal():
    net = DenoiserNet(8, 16, (16,), seed=1)
    prof = token_importance(net, SCHED, np.ones(8), (3, 3), _plan(), EMB)
    assert prof.scores[0] == prof.scores[1]


def test_importance_batch_matches_single_and_order():
    net = DenoiserNet(8, 16, (16,), seed=2)
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((4, 8))
    conds = [(1, 2, 3), (4, 5), (6,), (7, 8, 9, 10)]
    batch = importance_profiles(net, SCHED, xs, conds, _plan(), EMB, [10, 11, 12, 13])
    single = [token_importance(net, SCHED, x, c, _plan(), EMB, p) for x, c, p in zip(xs, conds, [10, 11, 12, 13])]
    for a, b in zip(batch, single):
        assert np.array_equal(a.scores, b.scores)
    rev = importance_profiles(net, SCHED, xs[::-1], conds[::-1], _plan(), EMB, [13, 12, 11, 10])
    for a, b in zip(batch, rev[::-1]):
        assert np.array_equal(a.scores, b.scores)


def test_build_reductions_dispatch():
    net = DenoiserNet(8, 16, (16,), seed=2)
    xs = np.zeros((2, 8))
    conds = [(1, 2, 3), (4, 5)]
    for strategy, k in [("null", 1), ("clip", 4), ("embed_noise", 4), ("importance", 4)]:
        out = build_reductions(strategy, net, SCHED, xs, conds, _plan(), EMB)
        assert [r.k for r in out] == [k, k]
    with pytest.raises(ValueError):
        build_reductions("other", net, SCHED, xs, conds, _plan(), EMB)
