"""Reduced condition sets: clipped thirds, embedding noise and importance
padding. Every set ends with the null condition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import ConditionEmbedder, DenoiserNet, NoiseSchedule, forward_diffuse, predict_eps
from .indicator import MonteCarloPlan

STRATEGIES = ("clip", "embed_noise", "importance", "null")


def null_condition() -> tuple:
    return ()


@dataclass(frozen=True, eq=False)
class ReducedConditionSet:
    entries: tuple
    strategy: str

    def __post_init__(self):
        if not self.entries:
            raise ValueError("reduced condition set cannot be empty")
        last = self.entries[-1]
        if not (isinstance(last, tuple) and len(last) == 0):
            raise ValueError("last entry must be the null condition")

    @property
    def k(self) -> int:
        return len(self.entries)

    def embeddings(self, embedder: ConditionEmbedder) -> np.ndarray:
        return np.stack([
            np.asarray(e, dtype=float) if isinstance(e, np.ndarray) else embedder.embed(e)
            for e in self.entries
        ])


@dataclass(frozen=True, eq=False)
class ImportanceProfile:
    scores: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("importance scores must be finite")

    def __len__(self):
        return len(self.scores)


def _check_nonempty(c):
    c = tuple(int(t) for t in c)
    if not c:
        raise ValueError("condition must be non-empty")
    return c


def reduce_null(c: Sequence[int] = ()) -> ReducedConditionSet:
    return ReducedConditionSet((null_condition(),), "null")


def reduce_clip(c: Sequence[int]) -> ReducedConditionSet:
    """First, middle and last thirds of the token sequence, then null."""
    c = _check_nonempty(c)
    L = len(c)
    first = c[0 : math.ceil(L / 3)]
    middle = c[L // 3 : math.ceil(2 * L / 3)]
    last = c[(2 * L) // 3 : L]
    return ReducedConditionSet((first, middle, last, null_condition()), "clip")


def reduce_embed_noise(
    c: Sequence[int],
    embedder: ConditionEmbedder,
    scales: Sequence[float],
    rng: np.random.Generator,
) -> ReducedConditionSet:
    """Convex blend (1 - s) * embed(c) + s * eta per scale, eta ~ N(0, var I)
    with var the coordinate variance of embed(c)."""
    if not len(scales):
        raise ValueError("scales must be non-empty")
    if any(not 0.0 <= s <= 1.0 for s in scales):
        raise ValueError("scales must lie in [0, 1]")
    e = embedder.embed(c)
    sd = float(np.std(e))
    entries = []
    for s in scales:
        eta = rng.normal(0.0, sd, size=e.shape) if sd > 0 else np.zeros_like(e)
        entries.append((1.0 - s) * e + s * eta)
    return ReducedConditionSet((*entries, null_condition()), "embed_noise")


def reduce_importance(
    c: Sequence[int],
    profile: ImportanceProfile,
    proportions: Sequence[float] = (0.3, 0.5, 0.7),
    pad_token_id: int = 0,
) -> ReducedConditionSet:
    """Pad the ceil(p L) most important tokens for each proportion p (ties: lower index)."""
    c = _check_nonempty(c)
    if len(profile) != len(c):
        raise ValueError("importance profile is not aligned with the condition")
    if any(not 0.0 < p < 1.0 for p in proportions) or list(proportions) != sorted(proportions):
        raise ValueError("proportions must lie in (0, 1) and be sorted ascending")
    order = np.argsort(-np.asarray(profile.scores), kind="stable")
    entries = []
    for p in proportions:
        n_pad = int(math.ceil(round(p * len(c), 9)))
        padded = set(order[:n_pad].tolist())
        entries.append(tuple(pad_token_id if i in padded else t for i, t in enumerate(c)))
    return ReducedConditionSet((*entries, null_condition()), "importance")


def _leave_one_out(c, pad_token_id):
    return [tuple(pad_token_id if i == j else t for i, t in enumerate(c)) for j in range(len(c))]


def importance_profiles(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    xs,
    conds: Sequence[Sequence[int]],
    plan: MonteCarloPlan,
    embedder: ConditionEmbedder,
    point_indices: Sequence[int] | None = None,
) -> list[ImportanceProfile]:
    """Batched ``token_importance`` over many points (same per-point results)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, dim = xs.shape
    if point_indices is None:
        point_indices = range(n)
    plan.validate(schedule)
    ts_m = plan.draw_timesteps(plan.M)
    T, E, C, X, sizes = [], [], [], [], []
    for x, c, p in zip(xs, conds, point_indices):
        c = _check_nonempty(c)
        variants = [c, *_leave_one_out(c, embedder.pad_token_id)]
        cemb = embedder.embed_many(variants)
        eps = plan.noise(p, plan.M, dim)
        for e in cemb:
            T.append(ts_m)
            E.append(eps)
            C.append(np.tile(e, (plan.M, 1)))
        X.append(np.broadcast_to(x, (len(variants) * plan.M, dim)))
        sizes.append(len(c))
    if not sizes:
        return []
    ts, eps, cembs, x0 = map(np.concatenate, (T, E, C, X))
    pred = predict_eps(model, forward_diffuse(x0, ts, eps, schedule), ts, cembs)
    errs = np.sum((pred - eps) ** 2, axis=1)
    out, off = [], 0
    for L in sizes:
        block = errs[off : off + (L + 1) * plan.M].reshape(L + 1, plan.M)
        off += (L + 1) * plan.M
        out.append(ImportanceProfile(np.array([np.mean(block[j + 1] - block[0]) for j in range(L)])))
    return out


def token_importance(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    x,
    c: Sequence[int],
    plan: MonteCarloPlan,
    embedder: ConditionEmbedder,
    point_index: int = 0,
) -> ImportanceProfile:
    """Mean loss increase, over the plan's M draws, from padding each token."""
    return importance_profiles(model, schedule, np.asarray(x)[None], [c], plan, embedder, [point_index])[0]


def build_reductions(
    strategy: str,
    model: DenoiserNet,
    schedule: NoiseSchedule,
    xs,
    conds,
    plan: MonteCarloPlan,
    embedder: ConditionEmbedder,
    point_indices=None,
    proportions=(0.3, 0.5, 0.7),
    scales=(0.5, 0.7, 0.9),
    seed: int = 0,
) -> list[ReducedConditionSet]:
    if point_indices is None:
        point_indices = range(len(conds))
    if strategy == "null":
        return [reduce_null(c) for c in conds]
    if strategy == "clip":
        return [reduce_clip(c) for c in conds]
    if strategy == "embed_noise":
        return [
            reduce_embed_noise(c, embedder, scales, np.random.default_rng([seed, int(p), 7]))
            for c, p in zip(conds, point_indices)
        ]
    if strategy == "importance":
        profiles = importance_profiles(model, schedule, xs, conds, plan, embedder, point_indices)
        return [reduce_importance(c, prof, proportions, embedder.pad_token_id) for c, prof in zip(conds, profiles)]
    raise ValueError(f"unknown reduction strategy {strategy!r}")
