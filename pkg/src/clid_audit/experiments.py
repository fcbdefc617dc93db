"""Experiment protocols: shadow-calibrated audits, training trajectories,
assumption validation, defenses and utility."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import (
    BASELINES,
    ThresholdAttackModel,
    VectorAttackModel,
    baseline_scores,
    clid_th_scores,
    feature_vectors,
    fit_tau,
    fit_threshold_attack,
    train_vector_classifier,
)
from .config import ExperimentConfig
from .diffusion import (
    ConditionEmbedder,
    DenoiserNet,
    ModelCheckpoint,
    NoiseSchedule,
    make_embedder,
    sample_ddpm,
)
from .indicator import (
    MonteCarloPlan,
    WindowCalibration,
    calibrate_timestep_window,
    score_points,
    window_around,
)
from .metrics import compute_roc_auc, distance, metrics_report
from .reduction import build_reductions
from .training import train
from .worlds import (
    DefensePolicy,
    GaussianMixtureWorld,
    SplitSpec,
    ToyDataset,
    apply_defense,
    generate_world,
    pseudo_captions,
    sample_dataset,
    split_dataset,
)

ROLES = ("shadow", "target")


def derive_seed(seed: int, *labels) -> int:
    """Independent 32-bit stream id for (seed, labels)."""
    h = hashlib.sha256(json.dumps([int(seed), *labels]).encode()).hexdigest()
    return int(h[:8], 16)


# --------------------------------------------------------------------------
# world


@dataclass
class WorldBundle:
    embedder: ConditionEmbedder
    world: GaussianMixtureWorld
    dataset: ToyDataset
    split: SplitSpec
    schedule: NoiseSchedule
    seed: int

    def train_indices(self, role: str) -> tuple:
        if role == "shadow":
            return self.split.aux_member_indices
        if role == "target":
            return self.split.member_indices
        raise ValueError(f"unknown role {role!r}")

    def eval_points(self, role: str) -> tuple[list[int], np.ndarray]:
        """Member-then-holdout indices and labels for the role's audit."""
        if role == "shadow":
            mem, out = self.split.aux_member_indices, self.split.aux_holdout_indices
        elif role == "target":
            mem, out = self.split.member_indices, self.split.holdout_indices
        else:
            raise ValueError(f"unknown role {role!r}")
        labels = np.r_[np.ones(len(mem), bool), np.zeros(len(out), bool)]
        return list(mem) + list(out), labels


def build_world(cfg: ExperimentConfig, seed: int | None = None) -> WorldBundle:
    seed = cfg.seed if seed is None else seed
    w = cfg.world
    emb = make_embedder(w.vocabulary_size, w.embedding_dim, derive_seed(seed, "embedder"), w.synonym_similarity)
    world = generate_world(derive_seed(seed, "world"), w.n_components, w.dim, w.stddev, emb, w.min_len, w.max_len)
    ds = sample_dataset(world, w.per_component, derive_seed(seed, "dataset"))
    split = split_dataset(ds, derive_seed(seed, "split"), w.member_n, w.holdout_n, w.aux_member_n, w.aux_holdout_n)
    return WorldBundle(emb, world, ds, split, cfg.training.schedule(), seed)


# --------------------------------------------------------------------------
# training


def new_model(cfg: ExperimentConfig, seed: int, role: str) -> DenoiserNet:
    t = cfg.training
    return DenoiserNet(
        cfg.world.dim, cfg.world.embedding_dim, tuple(t.hidden_widths), t.time_dim,
        seed=derive_seed(seed, "init", role),
    )


def train_role(
    bundle: WorldBundle,
    cfg: ExperimentConfig,
    role: str,
    *,
    defense: DefensePolicy | None = None,
    total_steps: int | None = None,
    resume_from: ModelCheckpoint | None = None,
    loader_log: list | None = None,
    on_checkpoint=None,
) -> list[ModelCheckpoint]:
    """Train the shadow (aux-member points) or target (member points) model.

    A defense applies to the target's training data only. ``loader_log``
    receives the dataset indices of every training batch.
    """
    seed = bundle.seed
    idx = np.asarray(bundle.train_indices(role), dtype=int)
    data = bundle.dataset.subset(idx)
    if defense is not None and defense.kind != "none":
        if role != "target":
            raise ValueError("defenses apply to the target model only")
        data = apply_defense(data, defense, np.random.default_rng(derive_seed(seed, "defense", role)))
    tcfg = cfg.training.training_config(derive_seed(seed, "train", role), total_steps)
    model = new_model(cfg, seed, role)
    batch_log = [] if loader_log is not None else None
    try:
        return train(
            model, data, tcfg, bundle.schedule, bundle.embedder,
            resume_from=resume_from, batch_log=batch_log, on_checkpoint=on_checkpoint,
        )
    finally:
        if loader_log is not None:
            loader_log.extend(idx[b] for b in batch_log)


# --------------------------------------------------------------------------
# scoring


def audit_conditions(bundle: WorldBundle, cfg: ExperimentConfig, indices: Sequence[int]) -> list[tuple]:
    """True conditions, or nearest-mean pseudo-captions when the attacker has no text."""
    if cfg.attacks.pseudo_caption:
        return pseudo_captions(bundle.dataset.xs[list(indices)], bundle.world)
    return [bundle.dataset.conds[i] for i in indices]


@dataclass
class ScoredSplit:
    indices: list
    labels: np.ndarray
    estimates: list
    baselines: dict
    baseline_queries: dict

    def mean_discrepancy(self) -> np.ndarray:
        return np.array([e.mean_discrepancy for e in self.estimates])


def make_plan(cfg: ExperimentConfig, timesteps, seed: int) -> MonteCarloPlan:
    p = cfg.plan
    return MonteCarloPlan(
        tuple(timesteps), p.M, p.N, p.draws_per_timestep,
        noise_seed=derive_seed(seed, "noise"),
        share_noise_across_conditions=p.share_noise_across_conditions,
    )


def calibrate(model: DenoiserNet, bundle: WorldBundle, cfg: ExperimentConfig) -> WindowCalibration:
    """Timestep window from the shadow model's split (or the fixed configured window)."""
    T = bundle.schedule.total_steps
    p = cfg.plan
    if p.timesteps is not None:
        ts = tuple(p.timesteps)
        return WindowCalibration(ts, ts[len(ts) // 2], {}, False)
    idx, labels = bundle.eval_points("shadow")
    conds = audit_conditions(bundle, cfg, idx)
    candidates = list(range(min(2, T), T + 1, p.candidate_stride))
    return calibrate_timestep_window(
        model, bundle.schedule, bundle.dataset.xs[idx], bundle.embedder.embed_many(conds), labels,
        candidates, p.window_width, p.window_spacing, derive_seed(bundle.seed, "calibration"), idx,
        p.min_window_auc,
    )


def score_split(
    model: DenoiserNet,
    bundle: WorldBundle,
    cfg: ExperimentConfig,
    plan: MonteCarloPlan,
    role: str,
    jobs: int = 1,
    baselines: Sequence[str] = BASELINES,
) -> ScoredSplit:
    idx, labels = bundle.eval_points(role)
    xs = bundle.dataset.xs[idx]
    conds = audit_conditions(bundle, cfg, idx)
    r = cfg.reduction
    reds = build_reductions(
        r.strategy, model, bundle.schedule, xs, conds, plan, bundle.embedder, idx,
        tuple(r.proportions), tuple(r.scales), derive_seed(bundle.seed, "reduction"),
    )
    cemb = bundle.embedder.embed_many(conds)
    ests = score_points(model, bundle.schedule, xs, cemb, [s.embeddings(bundle.embedder) for s in reds], plan, idx, jobs)
    base, bq = {}, {}
    for kind in baselines:
        base[kind], bq[kind] = baseline_scores(model, bundle.schedule, xs, cemb, kind, plan, idx)
    return ScoredSplit(idx, labels, ests, base, bq)


# --------------------------------------------------------------------------
# audit


@dataclass
class AuditResult:
    reports: dict
    calibration: WindowCalibration
    plan: MonteCarloPlan
    threshold_model: ThresholdAttackModel | None
    vector_model: VectorAttackModel | None
    shadow: ScoredSplit
    target: ScoredSplit
    scores: dict
    rocs: dict
    taus: dict

    def auc(self, name: str) -> float:
        return self.reports[name].auc

    def summary(self) -> dict:
        return {name: r.to_dict() for name, r in self.reports.items()}


def fit_and_report(
    shadow: ScoredSplit,
    target: ScoredSplit,
    cfg: ExperimentConfig,
    plan: MonteCarloPlan,
    calibration: WindowCalibration,
) -> AuditResult:
    """Fit every configured attack on shadow scores; apply unchanged to the target."""
    a = cfg.attacks
    reports, scores, rocs, taus = {}, {}, {}, {}
    th = vec = None
    k = shadow.estimates[0].k if shadow.estimates else 0
    clid_q = plan.queries_per_point(k)
    for name in a.names:
        if name == "clid_th":
            th = fit_threshold_attack(shadow.estimates, shadow.labels, a.alpha_step, a.scaler_center)
            s, tau, q = clid_th_scores(target.estimates, th), th.tau, clid_q
        elif name == "clid_vec":
            t = a.trees
            vec = train_vector_classifier(
                feature_vectors(shadow.estimates), shadow.labels, t.n_trees, t.max_depth, t.learning_rate, t.min_leaf
            )
            s, tau, q = vec.confidence(feature_vectors(target.estimates)), vec.tau, clid_q
        else:
            tau = fit_tau(shadow.baselines[name], shadow.labels)
            s, q = target.baselines[name], target.baseline_queries[name]
        s = np.asarray(s, dtype=float)
        reports[name] = metrics_report(name, s, target.labels, tau, q, a.target_fpr)
        rocs[name] = compute_roc_auc(s, target.labels)[0]
        scores[name], taus[name] = s, tau
    return AuditResult(reports, calibration, plan, th, vec, shadow, target, scores, rocs, taus)


def audit(
    shadow_model: DenoiserNet,
    target_model: DenoiserNet,
    bundle: WorldBundle,
    cfg: ExperimentConfig,
    jobs: int = 1,
    plan: MonteCarloPlan | None = None,
    calibration: WindowCalibration | None = None,
) -> AuditResult:
    if calibration is None:
        calibration = calibrate(shadow_model, bundle, cfg)
    if plan is None:
        plan = make_plan(cfg, calibration.window, bundle.seed)
    base = [n for n in cfg.attacks.names if n in BASELINES]
    shadow = score_split(shadow_model, bundle, cfg, plan, "shadow", jobs, base)
    target = score_split(target_model, bundle, cfg, plan, "target", jobs, base)
    return fit_and_report(shadow, target, cfg, plan, calibration)


@dataclass
class AuditRun:
    bundle: WorldBundle
    checkpoints: dict
    result: AuditResult

    def model(self, role: str) -> DenoiserNet:
        return self.checkpoints[role][-1].model()


def run_audit(cfg: ExperimentConfig, seed: int | None = None, jobs: int = 1, target_steps: int | None = None) -> AuditRun:
    """World, shadow and target training, calibration and the transferred attacks."""
    bundle = build_world(cfg, seed)
    ckpts = {
        "shadow": train_role(bundle, cfg, "shadow"),
        "target": train_role(bundle, cfg, "target", total_steps=target_steps),
    }
    res = audit(ckpts["shadow"][-1].model(), ckpts["target"][-1].model(), bundle, cfg, jobs)
    return AuditRun(bundle, ckpts, res)


# --------------------------------------------------------------------------
# trajectory and Monte Carlo ablation


def trajectory(
    shadow_ckpts: Sequence[ModelCheckpoint],
    target_ckpts: Sequence[ModelCheckpoint],
    bundle: WorldBundle,
    cfg: ExperimentConfig,
    jobs: int = 1,
) -> list[tuple[int, dict]]:
    """(step, reports) for every target checkpoint, attacks refit on the
    shadow checkpoint of the same step."""
    steps = [c.step for c in target_ckpts]
    if steps != sorted(steps):
        raise ValueError("checkpoints must be ordered by step")
    by_step = {c.step: c for c in shadow_ckpts}
    out = []
    for tc in target_ckpts:
        if tc.step not in by_step:
            raise ValueError(f"no shadow checkpoint at step {tc.step}")
        res = audit(by_step[tc.step].model(), tc.model(), bundle, cfg, jobs)
        out.append((tc.step, res.reports))
    return out


def first_step_reaching(traj: Sequence[tuple[int, dict]], attack: str, level: float) -> int | None:
    for step, reports in traj:
        if reports[attack].auc >= level:
            return step
    return None


def mc_ablation(
    shadow_model: DenoiserNet,
    target_model: DenoiserNet,
    bundle: WorldBundle,
    cfg: ExperimentConfig,
    sizes: Sequence[int] = (1, 2, 3, 4, 5),
    jobs: int = 1,
    calibration: WindowCalibration | None = None,
) -> dict:
    """AUC per M = N = n; windows wider than n shrink around the calibrated center."""
    if calibration is None:
        calibration = calibrate(shadow_model, bundle, cfg)
    base = make_plan(cfg, calibration.window, bundle.seed)
    T = bundle.schedule.total_steps
    out = {}
    for n in sizes:
        ts = base.timesteps if n >= len(base.timesteps) else window_around(base.center, n, T, cfg.plan.window_spacing)
        plan = base.with_(timesteps=ts, M=n, N=n)
        res = audit(shadow_model, target_model, bundle, cfg, jobs, plan, calibration)
        out[n] = res.reports
    return out


# --------------------------------------------------------------------------
# assumption validation


def truncate(c: Sequence[int], level: float) -> tuple:
    """Leading share of the tokens; at least one token unless level is 0."""
    c = tuple(c)
    if level >= 1.0:
        return c
    if level <= 0.0 or not c:
        return ()
    return c[: max(1, int(math.floor(level * len(c) + 0.5)))]


@dataclass
class AssumptionReport:
    levels: list
    metrics: list
    member: dict
    holdout: dict
    skipped_groups: dict = field(default_factory=dict)

    def differences(self, metric: str) -> list:
        """Hold-out minus member distance per level."""
        return [h - m for h, m in zip(self.holdout[metric], self.member[metric])]

    def full_minus_null(self, metric: str) -> float:
        d = self.differences(metric)
        return d[self.levels.index(1.0)] - d[self.levels.index(0.0)]

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "metrics": list(self.metrics),
            "member": self.member,
            "holdout": self.holdout,
            "differences": {m: self.differences(m) for m in self.metrics},
            "skipped_groups": self.skipped_groups,
        }


def _min_group(metric: str, dim: int) -> int:
    return dim + 1 if metric == "toy_fid" else 2


def validate_assumption(
    model: DenoiserNet,
    bundle: WorldBundle,
    member_indices: Sequence[int],
    holdout_indices: Sequence[int],
    truncation_levels: Sequence[float] = (1.0, 2 / 3, 1 / 3, 0.0),
    metrics: Sequence[str] = ("toy_fid",),
    samples_per_condition: int = 200,
    seed: int = 0,
) -> AssumptionReport:
    """Distances between generated and real points, for member and hold-out
    sets, with conditions truncated to each level.

    Points are grouped by their truncated condition; one generated sample set
    per group serves both sides. Per-level distances are group-size weighted
    averages over groups large enough for the metric.
    """
    levels = [float(v) for v in truncation_levels]
    if 1.0 not in levels or 0.0 not in levels:
        raise ValueError("truncation levels must include 1.0 and 0.0")
    ds, dim = bundle.dataset, bundle.world.dim
    if samples_per_condition < 2 or ("toy_fid" in metrics and samples_per_condition <= dim):
        raise ValueError("too few generated samples per condition for the metric")
    member, holdout = {m: [] for m in metrics}, {m: [] for m in metrics}
    skipped = {m: [] for m in metrics}
    for li, level in enumerate(levels):
        groups: dict = {}
        for side, idx in (("member", member_indices), ("holdout", holdout_indices)):
            for i in idx:
                groups.setdefault(truncate(ds.conds[i], level), {"member": [], "holdout": []})[side].append(i)
        gen = {}
        for gi, cond in enumerate(sorted(groups)):
            rng = np.random.default_rng(derive_seed(seed, "generate", li, list(cond)))
            gen[cond] = sample_ddpm(model, bundle.embedder.embed(cond), bundle.schedule, rng, samples_per_condition)
        for m in metrics:
            need = _min_group(m, dim)
            acc = {"member": [0.0, 0], "holdout": [0.0, 0]}
            n_skip = 0
            for cond, sides in groups.items():
                for side in ("member", "holdout"):
                    pts = sides[side]
                    if len(pts) < need:
                        n_skip += bool(pts)
                        continue
                    real = ds.xs[pts]
                    fake = gen[cond][: len(real)] if m == "one_nn" else gen[cond]
                    acc[side][0] += len(pts) * distance(fake, real, m)
                    acc[side][1] += len(pts)
            for side, store in (("member", member), ("holdout", holdout)):
                total, n = acc[side]
                store[m].append(total / n if n else float("nan"))
            skipped[m].append(n_skip)
    return AssumptionReport(levels, list(metrics), member, holdout, skipped)


# --------------------------------------------------------------------------
# utility and defenses


def utility_fid(model: DenoiserNet, bundle: WorldBundle, samples_per_condition: int = 200, seed: int = 0) -> float:
    """Per-component toy-FID between generated samples and fresh unseen draws,
    averaged over components."""
    w = bundle.world
    vals = []
    for j, (mu, sd, cond) in enumerate(w.components):
        gen = sample_ddpm(
            model, bundle.embedder.embed(cond), bundle.schedule,
            np.random.default_rng(derive_seed(seed, "utility_gen", j)), samples_per_condition,
        )
        real = mu + sd * np.random.default_rng(derive_seed(seed, "unseen", j)).standard_normal((samples_per_condition, w.dim))
        vals.append(distance(gen, real, "toy_fid"))
    return float(np.mean(vals))


@dataclass
class DefenseOutcome:
    label: str
    reports: dict
    utility_fid: float
    auc_delta: dict
    utility_delta: float

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "utility_fid": self.utility_fid,
            "auc_delta": self.auc_delta,
            "utility_delta": self.utility_delta,
        }


def with_augmentation(cfg: ExperimentConfig, enabled: bool) -> ExperimentConfig:
    c = copy.deepcopy(cfg)
    c.training.augmentation.enabled = enabled
    return c


def _outcome(label, res: AuditResult, util: float, base: AuditResult, base_util: float) -> DefenseOutcome:
    delta = {k: res.reports[k].auc - base.reports[k].auc for k in res.reports}
    return DefenseOutcome(label, res.reports, util, delta, util - base_util)


def run_defenses(
    cfg: ExperimentConfig, seed: int | None = None, jobs: int = 1, bundle: WorldBundle | None = None
) -> list[DefenseOutcome]:
    """Baseline (no augmentation, no defense), then one rerun per configured
    defense policy and, optionally, one with augmentation enabled."""
    base_cfg = with_augmentation(cfg, False)
    if bundle is None:
        bundle = build_world(base_cfg, seed)
    seed = bundle.seed
    n_util = cfg.evaluation.utility_samples_per_condition
    shadow = train_role(bundle, base_cfg, "shadow")[-1].model()
    target = train_role(bundle, base_cfg, "target")[-1].model()
    base = audit(shadow, target, bundle, base_cfg, jobs)
    base_util = utility_fid(target, bundle, n_util, seed)
    out = [DefenseOutcome("baseline", base.reports, base_util, {k: 0.0 for k in base.reports}, 0.0)]
    for entry in cfg.defense.policies:
        policy = entry.policy(bundle.embedder)
        tgt = train_role(bundle, base_cfg, "target", defense=policy)[-1].model()
        res = audit(shadow, tgt, bundle, base_cfg, jobs)
        out.append(_outcome(entry.label(), res, utility_fid(tgt, bundle, n_util, seed), base, base_util))
    if cfg.defense.compare_augmentation:
        aug_cfg = with_augmentation(cfg, True)
        sh = train_role(bundle, aug_cfg, "shadow")[-1].model()
        tg = train_role(bundle, aug_cfg, "target")[-1].model()
        res = audit(sh, tg, bundle, aug_cfg, jobs)
        out.append(_outcome("augmentation", res, utility_fid(tg, bundle, n_util, seed), base, base_util))
    return out
