"""Membership-inference metrics and sample-set distances."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import wasserstein_distance


@dataclass(frozen=True, eq=False)
class ROCCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("threshold,fpr,tpr\n")
            for th, a, b in zip(self.thresholds, self.fpr, self.tpr):
                f.write(f"{th!r},{a!r},{b!r}\n")


@dataclass
class MetricsReport:
    attack_name: str
    asr: float
    auc: float
    tpr_at_1pct_fpr: float
    n_member: int
    n_holdout: int
    query_count: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _labeled(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("metrics need at least one member and one hold-out point")
    return scores, labels, n_pos, n_neg


def compute_roc_auc(scores, labels) -> tuple[ROCCurve, float]:
    """ROC over unique thresholds (descending, ties flip together) and its
    trapezoidal area, which equals Mann-Whitney U / (n_pos n_neg)."""
    scores, labels, n_pos, n_neg = _labeled(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    # integer trapezoid keeps the tie convention exact
    area2 = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])) + fp[0] * tp[0]
    auc = float(area2) / (2.0 * n_pos * n_neg)
    return ROCCurve(fpr, tpr, thresholds), auc


def tpr_at_fpr(roc: ROCCurve, target_fpr: float = 0.01) -> float:
    """TPR at the largest achievable FPR <= target (step convention)."""
    ok = roc.fpr <= target_fpr + 1e-15
    return float(np.max(roc.tpr[ok])) if ok.any() else 0.0


def decide(score, tau) -> bool | np.ndarray:
    return np.asarray(score) > tau if np.ndim(score) else bool(score > tau)


def asr(scores, labels, tau: float) -> float:
    scores, labels, _, _ = _labeled(scores, labels)
    return float(np.mean((scores > tau) == labels))


def metrics_report(name, scores, labels, tau, query_count=None, target_fpr=0.01) -> MetricsReport:
    roc, auc = compute_roc_auc(scores, labels)
    labels = np.asarray(labels, dtype=bool)
    return MetricsReport(
        attack_name=name,
        asr=asr(scores, labels, tau),
        auc=auc,
        tpr_at_1pct_fpr=tpr_at_fpr(roc, target_fpr),
        n_member=int(labels.sum()),
        n_holdout=int((~labels).sum()),
        query_count=query_count,
    )


# --------------------------------------------------------------------------
# distances between sample sets


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))


def toy_fid(samples_a, samples_b, reg: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two vector sets."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    dim = a.shape[1]
    if len(a) <= dim or len(b) <= dim:
        raise ValueError(f"toy_fid needs more than {dim} samples per set")
    eye = reg * np.eye(dim)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    return frechet_gaussian(a.mean(0), cov_a, b.mean(0), cov_b)


def _projections(dim: int, n: int = 64, seed: int = 0) -> np.ndarray:
    if dim == 1:
        return np.ones((1, 1))
    p = np.random.default_rng(seed).standard_normal((n, dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 64, seed: int = 0) -> float:
    proj = _projections(a.shape[1], n_projections, seed)
    pa, pb = a @ proj.T, b @ proj.T
    return float(np.mean([wasserstein_distance(pa[:, i], pb[:, i]) for i in range(proj.shape[0])]))


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.clip(d, 0.0, None)


def kernel_mmd(a, b) -> float:
    """Biased MMD^2 with an RBF kernel; bandwidth = median pooled pairwise distance."""
    pooled = np.concatenate([a, b])
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    h = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 1.0
    if h <= 0:
        h = 1.0
    k = np.exp(-d2 / (2.0 * h * h))
    n = len(a)
    kaa, kbb, kab = k[:n, :n], k[n:, n:], k[:n, n:]
    return float(max(kaa.mean() + kbb.mean() - 2.0 * kab.mean(), 0.0))


def one_nn_accuracy(a, b) -> float:
    """Leave-one-out 1-NN two-sample accuracy (0.5 means indistinguishable)."""
    pooled = np.concatenate([a, b])
    labels = np.r_[np.zeros(len(a), bool), np.ones(len(b), bool)]
    d2 = _sq_dists(pooled, pooled)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    return float(np.mean(labels[nn] == labels))


def aux_distances(samples_a, samples_b, kind: str) -> float:
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sample sets must be non-empty")
    if kind == "sliced_wasserstein":
        return sliced_wasserstein(a, b)
    if kind == "kernel_mmd":
        return kernel_mmd(a, b)
    if kind == "one_nn":
        return one_nn_accuracy(a, b)
    raise ValueError(f"unknown distance kind {kind!r}")


def distance(samples_a, samples_b, kind: str) -> float:
    if kind == "toy_fid":
        return toy_fid(samples_a, samples_b)
    return aux_distances(samples_a, samples_b, kind)
