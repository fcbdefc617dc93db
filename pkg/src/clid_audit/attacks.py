"""Membership decisions from indicator estimates: robust scaling, the
threshold attack, the boosted-tree vector attack and the two baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import DenoiserNet, NoiseSchedule, forward_diffuse, predict_eps
from .gbdt import BoostedTrees
from .indicator import FeatureVector, IndicatorEstimate, MonteCarloPlan, build_feature_vector
from .metrics import compute_roc_auc, decide

BASELINES = ("loss", "monte_carlo")
BASELINE_QUERIES = {"loss": 1, "monte_carlo": 3}


@dataclass(frozen=True)
class RobustScalerParams:
    center: float
    iqr: float
    center_kind: str = "mean"

    def transform(self, a):
        return (np.asarray(a, dtype=float) - self.center) / self.iqr

    def to_dict(self) -> dict:
        return {"center": self.center, "iqr": self.iqr, "center_kind": self.center_kind}


def fit_robust_scaler(values, center: str = "mean") -> RobustScalerParams:
    """Center by mean (or median), scale by the inclusive-method IQR."""
    v = np.asarray(values, dtype=float)
    if v.size < 4 or not np.all(np.isfinite(v)):
        raise ValueError("robust scaler needs at least 4 finite values")
    q1, q3 = np.quantile(v, [0.25, 0.75], method="linear")
    iqr = float(q3 - q1)
    if iqr <= 0:
        raise ValueError("degenerate feature: interquartile range is zero")
    if center == "mean":
        c = float(np.mean(v))
    elif center == "median":
        c = float(np.median(v))
    else:
        raise ValueError(f"unknown center {center!r}")
    return RobustScalerParams(c, iqr, center)


def fit_tau(scores, labels) -> float:
    """Threshold maximizing accuracy of ``score > tau``; midpoint of the
    lowest optimal interval between consecutive distinct scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    u = np.unique(scores)
    # candidate k predicts member for scores >= u[k]; k = len(u) predicts none
    n_pos_at = np.array([np.sum(labels & (scores == s)) for s in u])
    n_neg_at = np.array([np.sum(~labels & (scores == s)) for s in u])
    pos_above = np.r_[np.cumsum(n_pos_at[::-1])[::-1], 0]
    neg_above = np.r_[np.cumsum(n_neg_at[::-1])[::-1], 0]
    correct = pos_above + ((~labels).sum() - neg_above)
    k = int(np.argmax(correct))
    if k == 0:
        return float(u[0] - 1.0)
    if k == len(u):
        return float(u[-1] + 1.0)
    return float((u[k - 1] + u[k]) / 2.0)


def _check_labels(labels):
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("shadow data must contain both member and hold-out labels")
    return labels


# --------------------------------------------------------------------------
# threshold attack


@dataclass
class ThresholdAttackModel:
    alpha: float
    tau: float
    scaler_D: RobustScalerParams
    scaler_L: RobustScalerParams
    shadow_auc: float = float("nan")
    orientation_ok: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def score_features(self, mean_d, elbo):
        return self.alpha * self.scaler_D.transform(mean_d) + (1 - self.alpha) * self.scaler_L.transform(elbo)

    def to_dict(self) -> dict:
        return {
            "kind": "clid_th",
            "alpha": self.alpha,
            "tau": self.tau,
            "scaler_D": self.scaler_D.to_dict(),
            "scaler_L": self.scaler_L.to_dict(),
            "shadow_auc": self.shadow_auc,
            "orientation_ok": self.orientation_ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdAttackModel":
        return cls(
            alpha=d["alpha"], tau=d["tau"],
            scaler_D=RobustScalerParams(**d["scaler_D"]),
            scaler_L=RobustScalerParams(**d["scaler_L"]),
            shadow_auc=d["shadow_auc"], orientation_ok=d["orientation_ok"],
        )


def _features(estimates: Sequence[IndicatorEstimate]):
    mean_d = np.array([e.mean_discrepancy for e in estimates])
    elbo = np.array([e.elbo_proxy for e in estimates])
    return mean_d, elbo


def score_clid_th(estimate: IndicatorEstimate, model: ThresholdAttackModel) -> float:
    if model.scaler_D is None or model.scaler_L is None:
        raise ValueError("threshold attack scalers are not fitted")
    return float(model.score_features(estimate.mean_discrepancy, estimate.elbo_proxy))


def clid_th_scores(estimates, model: ThresholdAttackModel) -> np.ndarray:
    mean_d, elbo = _features(estimates)
    return model.score_features(mean_d, elbo)


def fit_threshold_attack(
    estimates: Sequence[IndicatorEstimate],
    labels,
    alpha_step: float = 0.05,
    center: str = "mean",
) -> ThresholdAttackModel:
    """Scalers on all shadow values, alpha by grid search on shadow AUC
    (ties: smaller alpha), tau by shadow accuracy."""
    labels = _check_labels(labels)
    mean_d, elbo = _features(estimates)
    sD = fit_robust_scaler(mean_d, center)
    sL = fit_robust_scaler(elbo, center)
    zD, zL = sD.transform(mean_d), sL.transform(elbo)
    grid = np.round(np.arange(0.0, 1.0 + alpha_step / 2, alpha_step), 10)
    best_alpha, best_auc = 0.0, -np.inf
    for a in grid:
        auc = compute_roc_auc(a * zD + (1 - a) * zL, labels)[1]
        if auc > best_auc + 1e-12:
            best_alpha, best_auc = float(a), auc
    scores = best_alpha * zD + (1 - best_alpha) * zL
    return ThresholdAttackModel(
        alpha=best_alpha,
        tau=fit_tau(scores, labels),
        scaler_D=sD,
        scaler_L=sL,
        shadow_auc=best_auc,
        orientation_ok=best_auc >= 0.5,
    )


# --------------------------------------------------------------------------
# vector attack


@dataclass
class VectorAttackModel:
    classifier: BoostedTrees
    tau: float

    def confidence(self, vectors) -> np.ndarray:
        X = np.atleast_2d(np.array([np.asarray(getattr(v, "values", v), dtype=float) for v in vectors]))
        return self.classifier.predict_proba(X)

    def to_dict(self) -> dict:
        return {"kind": "clid_vec", "tau": self.tau, "classifier": self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "VectorAttackModel":
        return cls(BoostedTrees.from_dict(d["classifier"]), d["tau"])


def train_vector_classifier(
    shadow_vectors: Sequence[FeatureVector],
    labels,
    n_trees: int = 50,
    max_depth: int = 3,
    learning_rate: float = 0.1,
    min_leaf: int = 5,
) -> VectorAttackModel:
    labels = _check_labels(labels)
    rows = [np.asarray(getattr(v, "values", v), dtype=float) for v in shadow_vectors]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("feature vectors must share one length")
    X = np.stack(rows)
    clf = BoostedTrees(n_trees, max_depth, learning_rate, min_leaf).fit(X, labels)
    conf = clf.predict_proba(X)
    return VectorAttackModel(clf, fit_tau(conf, labels))


def feature_vectors(estimates: Sequence[IndicatorEstimate]) -> list[FeatureVector]:
    return [build_feature_vector(e) for e in estimates]


# --------------------------------------------------------------------------
# baselines


def baseline_scores(
    model: DenoiserNet,
    schedule: NoiseSchedule,
    xs,
    c_embeds,
    kind: str,
    plan: MonteCarloPlan,
    point_indices=None,
) -> tuple[np.ndarray, int]:
    """Loss: negated single-draw error at the plan's center timestep.
    Monte Carlo: negated mean error over 3 plan draws. Returns (scores, queries per point)."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    plan.validate(schedule)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    c_embeds = np.atleast_2d(np.asarray(c_embeds, dtype=float))
    n, dim = xs.shape
    if point_indices is None:
        point_indices = range(n)
    q = BASELINE_QUERIES[kind]
    ts_one = np.array([plan.center]) if kind == "loss" else plan.draw_timesteps(q)
    eps = np.concatenate([plan.noise(p, q, dim) for p in point_indices])
    ts = np.tile(ts_one, n)
    x0 = np.repeat(xs, q, axis=0)
    cembs = np.repeat(c_embeds, q, axis=0)
    pred = predict_eps(model, forward_diffuse(x0, ts, eps, schedule), ts, cembs)
    errs = np.sum((pred - eps) ** 2, axis=1).reshape(n, q)
    return -errs.mean(axis=1), q


def score_baseline(model, schedule, x, c_embed, kind: str, plan: MonteCarloPlan, point_index: int = 0) -> float:
    scores, _ = baseline_scores(model, schedule, np.asarray(x)[None], np.asarray(c_embed)[None], kind, plan, [point_index])
    return float(scores[0])


__all__ = [
    "RobustScalerParams", "fit_robust_scaler", "fit_tau", "ThresholdAttackModel",
    "score_clid_th", "clid_th_scores", "fit_threshold_attack", "VectorAttackModel",
    "train_vector_classifier", "feature_vectors", "baseline_scores", "score_baseline", "decide",
]
