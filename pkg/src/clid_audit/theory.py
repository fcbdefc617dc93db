"""Exact check of the KL form of the conditional-overfitting assumption
against its indicator form on finite (x-bin, condition) grids.

Entropy convention: ``negentropy(q) = sum q log q``. This is the functional
for which ``KL(q || p) = -E_q[log p] + negentropy(q)``, and with it the
entropy gap enters the indicator form with a minus sign. ``delta_h_shannon``
is the same gap under ordinary Shannon entropy (opposite sign).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-9


def _xlogy_ratio(a, b):
    """sum a * log(a / b) over a > 0."""
    m = a > 0
    return float(np.sum(a[m] * (np.log(a[m]) - np.log(b[m]))))


def _negentropy(a):
    m = a > 0
    return float(np.sum(a[m] * np.log(a[m])))


@dataclass(frozen=True, eq=False)
class DiscreteJointDistribution:
    """Joint probabilities over an (n_x bins) x (n_c conditions) grid."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or p.size == 0:
            raise ValueError("probs must be a non-empty 2-D array")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, weights) -> "DiscreteJointDistribution":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @classmethod
    def random(cls, rng: np.random.Generator, n_x: int, n_c: int, sparsity: float = 0.0):
        w = rng.dirichlet(np.ones(n_x * n_c)).reshape(n_x, n_c)
        if sparsity > 0:
            w = w * (rng.random(w.shape) >= sparsity)
            if w.sum() == 0:
                w[rng.integers(n_x), rng.integers(n_c)] = 1.0
        return cls.normalized(w)

    @property
    def shape(self):
        return self.probs.shape

    def marginal_x(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def marginal_c(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def conditional_x(self) -> np.ndarray:
        """Columns q(x|c); columns with q(c) = 0 are left at zero."""
        pc = self.marginal_c()
        out = np.zeros_like(self.probs)
        nz = pc > 0
        out[:, nz] = self.probs[:, nz] / pc[nz]
        return out

    def entropy_x(self) -> float:
        """Shannon entropy of the x-marginal."""
        return -_negentropy(self.marginal_x())

    def conditional_entropy_x(self) -> float:
        """E_c[H(q(x|c))], Shannon."""
        pc, cond = self.marginal_c(), self.conditional_x()
        return float(sum(pc[j] * -_negentropy(cond[:, j]) for j in range(len(pc)) if pc[j] > 0))


def conditional_minus_marginal_kl(q: DiscreteJointDistribution, p: DiscreteJointDistribution) -> float:
    """E_c KL(q(x|c) || p(x|c)) - KL(q(x) || p(x))."""
    cond_kl = _xlogy_ratio(q.probs, p.probs) - _xlogy_ratio(q.marginal_c(), p.marginal_c())
    return cond_kl - _xlogy_ratio(q.marginal_x(), p.marginal_x())


def expected_indicator(q: DiscreteJointDistribution, p: DiscreteJointDistribution) -> float:
    """E_q[log p(x|c) - log p(x)]."""
    m = q.probs > 0
    log_cond = np.log(p.probs[m]) - np.log(np.broadcast_to(p.marginal_c(), p.shape)[m])
    log_marg = np.log(np.broadcast_to(p.marginal_x()[:, None], p.shape)[m])
    return float(np.sum(q.probs[m] * (log_cond - log_marg)))


def entropy_gap(q_mem: DiscreteJointDistribution, q_out: DiscreteJointDistribution) -> float:
    """delta_H with the sum-q-log-q functional (the sign convention under which
    the indicator form subtracts it)."""
    return (
        -q_out.entropy_x() - q_mem.conditional_entropy_x()
        + q_mem.entropy_x() + q_out.conditional_entropy_x()
    )


@dataclass(frozen=True)
class TheoremCheck:
    form_a: float
    form_b: float
    delta_h: float
    delta_h_shannon: float
    indicator_gap: float
    equal: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _check_triple(q_mem, q_out, p):
    if not (q_mem.shape == q_out.shape == p.shape):
        raise ValueError("distributions must share one (x, c) support grid")
    for name, q in (("q_mem", q_mem), ("q_out", q_out)):
        if np.any((q.probs > 0) & (p.probs <= 0)):
            raise ValueError(f"p is zero where {name} has mass")


def verify_theorem_equivalence(
    q_mem: DiscreteJointDistribution,
    q_out: DiscreteJointDistribution,
    p: DiscreteJointDistribution,
) -> TheoremCheck:
    """Form A: KL gap hold-out minus KL gap member.
    Form B: E_mem[I] - E_out[I] - delta_H. Both are >= 0 exactly when the
    assumption holds, and they agree identically."""
    _check_triple(q_mem, q_out, p)
    form_a = conditional_minus_marginal_kl(q_out, p) - conditional_minus_marginal_kl(q_mem, p)
    gap = expected_indicator(q_mem, p) - expected_indicator(q_out, p)
    dh = entropy_gap(q_mem, q_out)
    form_b = gap - dh
    return TheoremCheck(
        form_a=form_a,
        form_b=form_b,
        delta_h=dh,
        delta_h_shannon=-dh,
        indicator_gap=gap,
        equal=abs(form_a - form_b) < TOL,
    )


def random_triple(rng: np.random.Generator, max_x: int = 8, max_c: int = 4):
    """Random (q_mem, q_out, p) with p strictly positive; the q's may be sparse."""
    n_x = int(rng.integers(1, max_x + 1))
    n_c = int(rng.integers(1, max_c + 1))
    sp = float(rng.uniform(0.0, 0.5))
    q_mem = DiscreteJointDistribution.random(rng, n_x, n_c, sp)
    q_out = DiscreteJointDistribution.random(rng, n_x, n_c, sp)
    p = DiscreteJointDistribution.random(rng, n_x, n_c)
    if np.any(p.probs <= 0):
        p = DiscreteJointDistribution.normalized(p.probs + 1e-3)
    return q_mem, q_out, p
