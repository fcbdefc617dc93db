"""Monte Carlo estimates of conditional likelihood discrepancies and the
conditional ELBO proxy, with paired noise and query reuse."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import DenoiserNet, NoiseSchedule, forward_diffuse, predict_eps
from .metrics import compute_roc_auc


class QueryBudgetError(RuntimeError):
    """Model query count disagrees with the M + K*N accounting."""


@dataclass(frozen=True)
class MonteCarloPlan:
    timesteps: tuple
    M: int = 3
    N: int = 3
    draws_per_timestep: int = 1
    noise_seed: int = 0
    share_noise_across_conditions: bool = True

    def __post_init__(self):
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
        if not self.timesteps:
            raise ValueError("plan needs at least one timestep")
        if self.M < 1 or self.N < 1 or self.draws_per_timestep < 1:
            raise ValueError("M, N and draws_per_timestep must be positive")

    def validate(self, schedule: NoiseSchedule) -> None:
        if min(self.timesteps) < 1 or max(self.timesteps) > schedule.total_steps:
            raise ValueError(f"plan timesteps outside [1, {schedule.total_steps}]")

    @property
    def center(self) -> int:
        return self.timesteps[len(self.timesteps) // 2]

    def draw_timesteps(self, count: int) -> np.ndarray:
        k = len(self.timesteps)
        return np.array(
            [self.timesteps[(i // self.draws_per_timestep) % k] for i in range(count)]
        )

    def noise(self, point_index: int, count: int, dim: int, stream: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.noise_seed, int(point_index), stream])
        return rng.standard_normal((count, dim))

    def queries_per_point(self, k: int) -> int:
        if self.share_noise_across_conditions:
            return self.M + k * self.N
        return self.M + 2 * k * self.N

    def with_(self, **kw) -> "MonteCarloPlan":
        d = dict(self.__dict__)
        d.update(kw)
        return MonteCarloPlan(**d)


@dataclass(eq=False)
class IndicatorEstimate:
    discrepancies: np.ndarray
    elbo_proxy: float
    query_count: int
    timesteps: np.ndarray
    err_conditional: np.ndarray
    err_reduced: np.ndarray
    point_index: int = 0
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.discrepancies)

    @property
    def mean_discrepancy(self) -> float:
        return float(np.mean(self.discrepancies))

    def records(self) -> list[tuple]:
        return [
            (int(t), float(self.err_conditional[i]), tuple(float(e) for e in self.err_reduced[:, i]))
            for i, t in enumerate(self.timesteps[: self.err_reduced.shape[1]])
        ]

    def to_record(self, split_label=None) -> dict:
        return {
            "point_id": int(self.point_index),
            "split_label": split_label,
            "discrepancies": [float(v) for v in self.discrepancies],
            "elbo_proxy": float(self.elbo_proxy),
            "query_count": int(self.query_count),
            "seed": int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector has non-finite entries")

    def __len__(self):
        return len(self.values)


def build_feature_vector(estimate: IndicatorEstimate) -> FeatureVector:
    return FeatureVector(np.r_[estimate.discrepancies, estimate.elbo_proxy].astype(float))


def _sq_err(model, schedule, x, ts, eps, cembs) -> np.ndarray:
    x_t = forward_diffuse(np.broadcast_to(x, eps.shape), ts, eps, schedule)
    pred = predict_eps(model, x_t, ts, cembs)
    r = pred - eps
    return np.sum(r * r, axis=1)


def _paired_mean(err_star: np.ndarray, err_c: np.ndarray) -> float:
    return float(np.mean(err_star - err_c))


def _as_row(v, dim):
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"expected a vector of length {dim}, got shape {v.shape}")
    return v


def discrepancy_from_draws(model, schedule, x, c_embed, c_star_embed, ts, eps) -> float:
    """Paired difference of squared errors on explicit (t, eps) draws."""
    ts = np.asarray(ts)
    if len(ts) == 0:
        raise ValueError("no draws")
    cembs = np.concatenate([np.tile(c_embed, (len(ts), 1)), np.tile(c_star_embed, (len(ts), 1))])
    errs = _sq_err(model, schedule, x, np.r_[ts, ts], np.concatenate([eps, eps]), cembs)
    return _paired_mean(errs[len(ts):], errs[: len(ts)])


def estimate_discrepancy(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    x,
    c_embed,
    c_star_embed,
    plan: MonteCarloPlan,
    point_index: int = 0,
) -> float:
    """Mean over N shared (t, eps) draws of ||eps(c*) - eps||^2 - ||eps(c) - eps||^2."""
    plan.validate(schedule)
    x = _as_row(x, model.data_dim)
    c_embed = _as_row(c_embed, model.cond_dim)
    c_star_embed = _as_row(c_star_embed, model.cond_dim)
    ts = plan.draw_timesteps(plan.N)
    eps = plan.noise(point_index, plan.N, model.data_dim)
    return discrepancy_from_draws(model, schedule, x, c_embed, c_star_embed, ts, eps)


def estimate_elbo_proxy(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    x,
    c_embed,
    plan: MonteCarloPlan,
    point_index: int = 0,
) -> float:
    """Negated mean conditional squared error over M draws."""
    plan.validate(schedule)
    x = _as_row(x, model.data_dim)
    c_embed = _as_row(c_embed, model.cond_dim)
    ts = plan.draw_timesteps(plan.M)
    eps = plan.noise(point_index, plan.M, model.data_dim)
    errs = _sq_err(model, schedule, x, ts, eps, np.tile(c_embed, (plan.M, 1)))
    return -float(np.mean(errs))


def _point_rows(plan, x, c_embed, reduced, point_index, dim):
    """Stack every query for one point in a fixed order: M conditional rows,
    then N rows per reduced condition (plus N conditional rows each when
    noise is not shared)."""
    k = reduced.shape[0]
    ts_m = plan.draw_timesteps(plan.M)
    eps_m = plan.noise(point_index, plan.M, dim)
    ts_n = plan.draw_timesteps(plan.N)
    blocks_t, blocks_e, blocks_c = [ts_m], [eps_m], [np.tile(c_embed, (plan.M, 1))]
    for i in range(k):
        if plan.share_noise_across_conditions:
            eps_i = plan.noise(point_index, plan.N, dim)
        else:
            eps_i = plan.noise(point_index, plan.N, dim, stream=1 + i)
            blocks_t.append(ts_n)
            blocks_e.append(eps_i)
            blocks_c.append(np.tile(c_embed, (plan.N, 1)))
        blocks_t.append(ts_n)
        blocks_e.append(eps_i)
        blocks_c.append(np.tile(reduced[i], (plan.N, 1)))
    xs = np.broadcast_to(x, (sum(len(e) for e in blocks_e), dim))
    return np.concatenate(blocks_t), np.concatenate(blocks_e), np.concatenate(blocks_c), xs


def _assemble(plan, errs, k, point_index):
    M, N = plan.M, plan.N
    err_c = errs[:M]
    rest = errs[M:]
    disc = np.empty(k)
    err_red = np.empty((k, N))
    if plan.share_noise_across_conditions:
        if M != N:
            raise ValueError("noise reuse requires M == N")
        err_red = rest.reshape(k, N)
        for i in range(k):
            disc[i] = _paired_mean(err_red[i], err_c[:N])
    else:
        pairs = rest.reshape(k, 2, N)
        err_red = pairs[:, 1, :].copy()
        for i in range(k):
            disc[i] = _paired_mean(pairs[i, 1], pairs[i, 0])
    return disc, -float(np.mean(err_c)), err_c.copy(), err_red


def score_points(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    xs,
    c_embeds,
    reductions: Sequence[np.ndarray],
    plan: MonteCarloPlan,
    point_indices: Sequence[int] | None = None,
    jobs: int = 1,
) -> list[IndicatorEstimate]:
    """Score many points; equivalent, bitwise, to calling ``score_point`` on each."""
    plan.validate(schedule)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    c_embeds = np.atleast_2d(np.asarray(c_embeds, dtype=float))
    n, dim = xs.shape
    if point_indices is None:
        point_indices = range(n)
    point_indices = [int(i) for i in point_indices]
    if len(point_indices) != n or len(reductions) != n or c_embeds.shape[0] != n:
        raise ValueError("xs, conditions, reductions and point indices must align")
    if plan.share_noise_across_conditions and plan.M != plan.N:
        raise ValueError("noise reuse requires M == N")

    def run(chunk):
        rows = [
            _point_rows(plan, xs[j], c_embeds[j], np.atleast_2d(reductions[j]), point_indices[j], dim)
            for j in chunk
        ]
        if not rows:
            return []
        before = model.queries.value
        ts = np.concatenate([r[0] for r in rows])
        eps = np.concatenate([r[1] for r in rows])
        cembs = np.concatenate([r[2] for r in rows])
        x0 = np.concatenate([r[3] for r in rows])
        x_t = forward_diffuse(x0, ts, eps, schedule)
        pred = predict_eps(model, x_t, ts, cembs)
        errs = np.sum((pred - eps) ** 2, axis=1)
        out, off = [], 0
        for j, r in zip(chunk, rows):
            k = np.atleast_2d(reductions[j]).shape[0]
            q = plan.queries_per_point(k)
            if len(r[0]) != q:
                raise QueryBudgetError(f"point {point_indices[j]}: built {len(r[0])} queries, expected {q}")
            disc, elbo, err_c, err_red = _assemble(plan, errs[off : off + q], k, point_indices[j])
            off += q
            out.append(IndicatorEstimate(
                discrepancies=disc, elbo_proxy=elbo, query_count=q,
                timesteps=plan.draw_timesteps(max(plan.M, plan.N)),
                err_conditional=err_c, err_reduced=err_red,
                point_index=point_indices[j], seed=plan.noise_seed,
            ))
        if jobs == 1 and model.queries.value - before != off:
            raise QueryBudgetError("model query counter disagrees with accounting")
        return out

    idx = list(range(n))
    if jobs <= 1:
        return run(idx)
    chunks = [idx[i::jobs] for i in range(jobs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(run, chunks))
    result = [None] * n
    for chunk, part in zip(chunks, parts):
        for j, est in zip(chunk, part):
            result[j] = est
    return result


def score_point(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    x,
    c_embed,
    reduction: np.ndarray,
    plan: MonteCarloPlan,
    point_index: int = 0,
) -> IndicatorEstimate:
    """All k discrepancies and the ELBO proxy for one point in M + K*N queries."""
    x = _as_row(x, model.data_dim)
    c_embed = _as_row(c_embed, model.cond_dim)
    return score_points(model, schedule, x[None], c_embed[None], [reduction], plan, [point_index])[0]


def write_indicator_dump(path, estimates: Sequence[IndicatorEstimate], labels=None) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for i, est in enumerate(estimates):
            lab = None if labels is None else bool(labels[i])
            f.write(json.dumps(est.to_record(lab), sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# timestep window calibration


@dataclass
class WindowCalibration:
    window: tuple
    center: int
    aucs: dict
    fallback: bool


def single_draw_discrepancies(model, schedule, xs, c_embeds, t, noise_seed=0, point_indices=None):
    """One paired draw per point of the null-condition discrepancy at timestep t."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, dim = xs.shape
    if point_indices is None:
        point_indices = range(n)
    eps = np.stack([
        np.random.default_rng([noise_seed, int(p), 10_000 + int(t)]).standard_normal(dim)
        for p in point_indices
    ])
    ts = np.full(2 * n, int(t))
    cembs = np.concatenate([c_embeds, np.zeros_like(c_embeds)])
    errs = _sq_err_rows(model, schedule, np.concatenate([xs, xs]), ts, np.concatenate([eps, eps]), cembs)
    return errs[n:] - errs[:n]


def _sq_err_rows(model, schedule, x0, ts, eps, cembs):
    pred = predict_eps(model, forward_diffuse(x0, ts, eps, schedule), ts, cembs)
    return np.sum((pred - eps) ** 2, axis=1)


def window_around(center: int, width: int, total_steps: int, spacing: int = 1) -> tuple:
    half = width // 2
    lo = center - half * spacing
    lo = max(1, min(lo, total_steps - (width - 1) * spacing))
    lo = max(lo, 1)
    return tuple(t for t in range(lo, lo + width * spacing, spacing) if t <= total_steps)


def calibrate_timestep_window(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    xs,
    c_embeds,
    labels,
    candidates: Sequence[int],
    width: int = 3,
    spacing: int = 1,
    noise_seed: int = 0,
    point_indices=None,
    min_auc: float = 0.55,
) -> WindowCalibration:
    """Pick the timestep whose single-draw discrepancy best separates the
    shadow labels; fall back to mid-schedule when nothing beats ``min_auc``."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("calibration needs both member and hold-out probe points")
    candidates = [int(t) for t in candidates]
    if not candidates:
        raise ValueError("no candidate timesteps")
    c_embeds = np.atleast_2d(np.asarray(c_embeds, dtype=float))
    aucs = {}
    for t in candidates:
        d = single_draw_discrepancies(model, schedule, xs, c_embeds, t, noise_seed, point_indices)
        aucs[t] = compute_roc_auc(d, labels)[1]
    best = max(candidates, key=lambda t: (aucs[t], -t))
    fallback = len(candidates) > 1 and aucs[best] <= min_auc
    center = (schedule.total_steps + 1) // 2 if fallback else best
    return WindowCalibration(
        window=window_around(center, width, schedule.total_steps, spacing),
        center=center,
        aucs=aucs,
        fallback=fallback,
    )
