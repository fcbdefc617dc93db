"""Synthetic conditional data: Gaussian-mixture worlds whose components are
named by token sequences, dataset splits, augmentation and text defenses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import ConditionEmbedder


def _count(fraction: float, n: int) -> int:
    # ceil with slack so that 0.3 * 10 counts as 3, not 4
    return int(math.ceil(round(fraction * n, 9)))


@dataclass(eq=False)
class GaussianMixtureWorld:
    means: np.ndarray
    stddevs: np.ndarray
    canonical: list[tuple[int, ...]]
    identifying_tokens: list[int]
    rng_seed: int

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def components(self):
        return list(zip(self.means, self.stddevs, self.canonical))

    def token_inventory(self) -> set[int]:
        return {tok for seq in self.canonical for tok in seq}

    def component_of(self, seq: Sequence[int]) -> int | None:
        try:
            return self.canonical.index(tuple(seq))
        except ValueError:
            return None

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stddevs": self.stddevs.tolist(),
            "canonical": [list(c) for c in self.canonical],
            "identifying_tokens": list(self.identifying_tokens),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureWorld":
        return cls(
            means=np.array(d["means"], dtype=float),
            stddevs=np.array(d["stddevs"], dtype=float),
            canonical=[tuple(int(t) for t in c) for c in d["canonical"]],
            identifying_tokens=[int(t) for t in d["identifying_tokens"]],
            rng_seed=int(d["rng_seed"]),
        )


@dataclass(eq=False)
class ToyDataset:
    xs: np.ndarray
    conds: list[tuple[int, ...]]
    world: GaussianMixtureWorld | None = None
    components: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.conds)

    def subset(self, indices) -> "ToyDataset":
        idx = np.asarray(indices, dtype=int)
        comps = None if self.components is None else self.components[idx]
        return ToyDataset(
            self.xs[idx].copy(), [self.conds[i] for i in idx], self.world, comps
        )

    def with_conds(self, conds) -> "ToyDataset":
        return ToyDataset(self.xs.copy(), [tuple(c) for c in conds], self.world, self.components)

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with path.open("w") as f:
            for x, c in zip(self.xs, self.conds):
                f.write(json.dumps({"x": [float(v) for v in x], "c": list(c)}) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path, world: GaussianMixtureWorld | None = None) -> "ToyDataset":
        xs, conds = [], []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                xs.append(rec["x"])
                conds.append(tuple(rec["c"]))
        comps = None
        if world is not None:
            comps = np.array([
                -1 if world.component_of(c) is None else world.component_of(c) for c in conds
            ])
        return cls(np.array(xs, dtype=float), conds, world, comps)


@dataclass(frozen=True)
class SplitSpec:
    member_indices: tuple
    holdout_indices: tuple
    aux_member_indices: tuple
    aux_holdout_indices: tuple
    seed: int

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({
            "member": list(self.member_indices),
            "holdout": list(self.holdout_indices),
            "aux_member": list(self.aux_member_indices),
            "aux_holdout": list(self.aux_holdout_indices),
            "seed": self.seed,
        }, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, path) -> "SplitSpec":
        d = json.loads(Path(path).read_text())
        return cls(
            tuple(d["member"]), tuple(d["holdout"]),
            tuple(d["aux_member"]), tuple(d["aux_holdout"]), d["seed"],
        )


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_prob: float = 0.5
    crop_mask_fraction: float = 0.125
    jitter_stddev: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0.0 <= self.crop_mask_fraction < 1.0:
            raise ValueError("crop_mask_fraction must lie in [0, 1)")
        if self.jitter_stddev < 0:
            raise ValueError("jitter_stddev must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, enabled=False)


@dataclass(frozen=True)
class DefensePolicy:
    kind: str = "none"
    delete_fraction: float = 0.0
    shuffle_fraction: float = 0.0
    synonym_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("none", "rephrase", "delete", "shuffle"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 0.0 <= self.delete_fraction <= 1.0:
            raise ValueError("delete_fraction must lie in [0, 1]")
        if not 0.0 <= self.shuffle_fraction <= 1.0:
            raise ValueError("shuffle_fraction must lie in [0, 1]")
        values = list(self.synonym_map.values())
        if len(set(values)) != len(values):
            raise ValueError("synonym_map must be injective")
        if set(values) & set(self.synonym_map):
            raise ValueError("synonym_map must map into tokens outside its domain")

    @classmethod
    def rephrase(cls, embedder: ConditionEmbedder) -> "DefensePolicy":
        return cls("rephrase", synonym_map={t: embedder.synonym_of(t) for t in embedder.regular_tokens})


# --------------------------------------------------------------------------


def generate_world(
    seed: int,
    n_components: int,
    dim: int,
    stddev: float,
    vocab: ConditionEmbedder,
    min_len: int = 3,
    max_len: int = 6,
) -> GaussianMixtureWorld:
    """Means uniform on [-3, 3]^dim; each component gets one unique identifying
    token placed among filler tokens shared across components."""
    if n_components < 1 or dim < 1:
        raise ValueError("n_components and dim must be positive")
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    regular = list(vocab.regular_tokens)
    if n_components > len(regular) - 1:
        raise ValueError(
            f"vocabulary too small: {len(regular)} regular tokens support at most "
            f"{len(regular) - 1} components"
        )
    rng = np.random.default_rng(seed)
    means = rng.uniform(-3.0, 3.0, size=(n_components, dim))
    perm = [regular[i] for i in rng.permutation(len(regular))]
    identifying, fillers = perm[:n_components], perm[n_components:]
    canonical = []
    for tok in identifying:
        length = int(rng.integers(min_len, max_len + 1))
        seq = [fillers[i] for i in rng.integers(0, len(fillers), size=length - 1)]
        seq.insert(int(rng.integers(0, length)), tok)
        canonical.append(tuple(seq))
    return GaussianMixtureWorld(
        means=means,
        stddevs=np.full(n_components, float(stddev)),
        canonical=canonical,
        identifying_tokens=identifying,
        rng_seed=seed,
    )


def sample_dataset(world: GaussianMixtureWorld, per_component: int, seed: int) -> ToyDataset:
    if per_component < 1:
        raise ValueError("per_component must be >= 1")
    rng = np.random.default_rng(seed)
    xs, conds, comps = [], [], []
    for j, (mu, sd, seq) in enumerate(world.components):
        xs.append(mu + sd * rng.standard_normal((per_component, world.dim)))
        conds += [seq] * per_component
        comps += [j] * per_component
    return ToyDataset(np.concatenate(xs), conds, world, np.array(comps))


def split_dataset(
    dataset: ToyDataset,
    seed: int,
    member_n: int,
    holdout_n: int,
    aux_member_n: int,
    aux_holdout_n: int,
) -> SplitSpec:
    sizes = [member_n, holdout_n, aux_member_n, aux_holdout_n]
    if min(sizes) < 0:
        raise ValueError("split sizes must be non-negative")
    if sum(sizes) > len(dataset):
        raise ValueError(f"split sizes {sizes} exceed dataset size {len(dataset)}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    bounds = np.cumsum([0] + sizes)
    parts = [tuple(int(i) for i in perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return SplitSpec(*parts, seed=seed)


def augment(x, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Flip analog (negate one coordinate), crop analog (zero a coordinate
    subset) and jitter, in that order."""
    x = np.array(x, dtype=float)
    if not policy.enabled:
        return x
    dim = x.shape[0]
    if rng.random() < policy.flip_prob:
        j = rng.integers(dim)
        x[j] = -x[j]
    n_mask = _count(policy.crop_mask_fraction, dim)
    if n_mask:
        x[rng.choice(dim, size=n_mask, replace=False)] = 0.0
    if policy.jitter_stddev > 0:
        x = x + rng.normal(0.0, policy.jitter_stddev, size=dim)
    return x


def augment_batch(xs, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Row-wise ``augment`` with vectorized draws (different stream layout)."""
    xs = np.array(xs, dtype=float)
    if not policy.enabled:
        return xs
    n, dim = xs.shape
    rows = np.arange(n)
    flip = rng.random(n) < policy.flip_prob
    cols = rng.integers(dim, size=n)
    xs[rows[flip], cols[flip]] *= -1.0
    n_mask = _count(policy.crop_mask_fraction, dim)
    if n_mask:
        masked = np.argsort(rng.random((n, dim)), axis=1)[:, :n_mask]
        xs[rows[:, None], masked] = 0.0
    if policy.jitter_stddev > 0:
        xs += rng.normal(0.0, policy.jitter_stddev, size=xs.shape)
    return xs


def apply_defense(dataset: ToyDataset, policy: DefensePolicy, rng: np.random.Generator) -> ToyDataset:
    if policy.kind == "none":
        return dataset.with_conds(dataset.conds)
    if policy.kind == "rephrase":
        m = policy.synonym_map
        return dataset.with_conds([tuple(m.get(t, t) for t in c) for c in dataset.conds])
    if policy.kind == "delete":
        out = []
        for c in dataset.conds:
            n_del = min(_count(policy.delete_fraction, len(c)), len(c) - 1)
            if n_del <= 0:
                out.append(tuple(c))
                continue
            drop = set(rng.choice(len(c), size=n_del, replace=False).tolist())
            out.append(tuple(t for i, t in enumerate(c) if i not in drop))
        return dataset.with_conds(out)
    # shuffle
    n = len(dataset)
    m = int(math.floor(policy.shuffle_fraction * n + 0.5))
    conds = list(dataset.conds)
    chosen = rng.choice(n, size=m, replace=False)
    moved = [conds[i] for i in chosen]
    for i, j in zip(chosen, rng.permutation(m)):
        conds[i] = moved[j]
    return dataset.with_conds(conds)


def pseudo_caption(x, world: GaussianMixtureWorld) -> tuple[int, ...]:
    """Canonical sequence of the nearest component mean (ties: lowest index)."""
    d2 = np.sum((world.means - np.asarray(x, dtype=float)) ** 2, axis=1)
    return world.canonical[int(np.argmin(d2))]


def pseudo_captions(xs, world: GaussianMixtureWorld) -> list[tuple[int, ...]]:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    d2 = ((xs[:, None, :] - world.means[None]) ** 2).sum(axis=2)
    return [world.canonical[int(j)] for j in np.argmin(d2, axis=1)]
