"""Experiment configuration: dataclass sections, JSON schema, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .diffusion import make_linear_schedule
from .training import TrainingConfig
from .worlds import AugmentationPolicy, DefensePolicy

ATTACKS = ("clid_th", "clid_vec", "loss", "monte_carlo")
METRICS = ("toy_fid", "sliced_wasserstein", "kernel_mmd", "one_nn")


class ConfigError(ValueError):
    """Raised for any configuration that fails schema or cross-field checks."""


@dataclass
class WorldConfig:
    n_components: int = 8
    dim: int = 8
    stddev: float = 1.0
    vocabulary_size: int = 32
    embedding_dim: int = 16
    synonym_similarity: float = 0.8
    min_len: int = 3
    max_len: int = 6
    per_component: int = 200
    member_n: int = 400
    holdout_n: int = 400
    aux_member_n: int = 400
    aux_holdout_n: int = 400


@dataclass
class AugmentationConfig:
    enabled: bool = False
    flip_prob: float = 0.5
    crop_mask_fraction: float = 0.125
    jitter_stddev: float = 0.0

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.flip_prob, self.crop_mask_fraction, self.jitter_stddev, self.enabled)


@dataclass
class TrainingSection:
    learning_rate: float = 1e-3
    batch_size: int = 64
    total_steps: int = 14400
    checkpoint_every: int = 2400
    cond_drop_prob: float = 0.1
    hidden_widths: list = field(default_factory=lambda: [128, 128, 128])
    time_dim: int = 16
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05
    sigma_mode: str = "beta"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def training_config(self, rng_seed: int, total_steps: int | None = None) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            total_steps=self.total_steps if total_steps is None else total_steps,
            checkpoint_every=self.checkpoint_every,
            augmentation=self.augmentation.policy(),
            cond_drop_prob=self.cond_drop_prob,
            rng_seed=rng_seed,
        )

    def schedule(self):
        return make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end, self.sigma_mode)


@dataclass
class ReductionConfig:
    strategy: str = "importance"
    proportions: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    scales: list = field(default_factory=lambda: [0.5, 0.7, 0.9])


@dataclass
class PlanConfig:
    M: int = 3
    N: int = 3
    draws_per_timestep: int = 1
    share_noise_across_conditions: bool = True
    timesteps: list | None = None
    window_width: int = 3
    window_spacing: int = 1
    candidate_stride: int = 4
    min_window_auc: float = 0.55


@dataclass
class TreeConfig:
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5


@dataclass
class AttackConfig:
    names: list = field(default_factory=lambda: list(ATTACKS))
    alpha_step: float = 0.05
    scaler_center: str = "mean"
    target_fpr: float = 0.01
    pseudo_caption: bool = False
    trees: TreeConfig = field(default_factory=TreeConfig)


@dataclass
class EvaluationConfig:
    truncation_levels: list = field(default_factory=lambda: [1.0, 2 / 3, 1 / 3, 0.0])
    assumption_metrics: list = field(default_factory=lambda: list(METRICS))
    samples_per_condition: int = 200
    utility_samples_per_condition: int = 200


@dataclass
class DefenseEntry:
    kind: str = "none"
    delete_fraction: float = 0.0
    shuffle_fraction: float = 0.0

    def label(self) -> str:
        if self.kind == "delete":
            return f"delete_{round(self.delete_fraction * 100)}"
        if self.kind == "shuffle":
            return f"shuffle_{round(self.shuffle_fraction * 100)}"
        return self.kind

    def policy(self, embedder=None) -> DefensePolicy:
        if self.kind == "rephrase":
            return DefensePolicy.rephrase(embedder)
        return DefensePolicy(self.kind, self.delete_fraction, self.shuffle_fraction)


@dataclass
class DefenseConfig:
    policies: list = field(default_factory=lambda: [DefenseEntry(), DefenseEntry("shuffle", 0.0, 0.5)])
    compare_augmentation: bool = True


@dataclass
class OutputConfig:
    write_indicator_dumps: bool = True
    write_roc_csv: bool = True
    write_svg: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        """Hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        c.seed = int(seed)
        return c


# --------------------------------------------------------------------------
# schema

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_BOOL = {"type": "boolean"}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "clid-audit experiment configuration",
    **_obj({
        "seed": _INT,
        "out_dir": {"type": "string", "minLength": 1},
        "world": _obj({
            "n_components": _POS_INT,
            "dim": _POS_INT,
            "stddev": {"type": "number", "exclusiveMinimum": 0},
            "vocabulary_size": {"type": "integer", "minimum": 3},
            "embedding_dim": _POS_INT,
            "synonym_similarity": _UNIT,
            "min_len": _POS_INT,
            "max_len": _POS_INT,
            "per_component": _POS_INT,
            "member_n": _NONNEG_INT,
            "holdout_n": _NONNEG_INT,
            "aux_member_n": _NONNEG_INT,
            "aux_holdout_n": _NONNEG_INT,
        }),
        "training": _obj({
            "learning_rate": {"type": "number", "exclusiveMinimum": 0},
            "batch_size": _POS_INT,
            "total_steps": _NONNEG_INT,
            "checkpoint_every": _POS_INT,
            "cond_drop_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "hidden_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
            "time_dim": {"type": "integer", "minimum": 2, "multipleOf": 2},
            "diffusion_steps": _POS_INT,
            "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "sigma_mode": {"enum": ["beta", "posterior"]},
            "augmentation": _obj({
                "enabled": _BOOL,
                "flip_prob": _UNIT,
                "crop_mask_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "jitter_stddev": {"type": "number", "minimum": 0},
            }),
        }),
        "reduction": _obj({
            "strategy": {"enum": ["clip", "embed_noise", "importance", "null"]},
            "proportions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}, "minItems": 1},
            "scales": {"type": "array", "items": _UNIT, "minItems": 1},
        }),
        "plan": _obj({
            "M": _POS_INT,
            "N": _POS_INT,
            "draws_per_timestep": _POS_INT,
            "share_noise_across_conditions": _BOOL,
            "timesteps": {"oneOf": [{"type": "null"}, {"type": "array", "items": _POS_INT, "minItems": 1}]},
            "window_width": _POS_INT,
            "window_spacing": _POS_INT,
            "candidate_stride": _POS_INT,
            "min_window_auc": _UNIT,
        }),
        "attacks": _obj({
            "names": {"type": "array", "items": {"enum": list(ATTACKS)}, "minItems": 1, "uniqueItems": True},
            "alpha_step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "scaler_center": {"enum": ["mean", "median"]},
            "target_fpr": _UNIT,
            "pseudo_caption": _BOOL,
            "trees": _obj({
                "n_trees": _POS_INT,
                "max_depth": _POS_INT,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "min_leaf": _POS_INT,
            }),
        }),
        "evaluation": _obj({
            "truncation_levels": {"type": "array", "items": _UNIT, "minItems": 2},
            "assumption_metrics": {"type": "array", "items": {"enum": list(METRICS)}, "minItems": 1, "uniqueItems": True},
            "samples_per_condition": _POS_INT,
            "utility_samples_per_condition": _POS_INT,
        }),
        "defense": _obj({
            "policies": {"type": "array", "items": _obj({
                "kind": {"enum": ["none", "rephrase", "delete", "shuffle"]},
                "delete_fraction": _UNIT,
                "shuffle_fraction": _UNIT,
            })},
            "compare_augmentation": _BOOL,
        }),
        "output": _obj({
            "write_indicator_dumps": _BOOL,
            "write_roc_csv": _BOOL,
            "write_svg": _BOOL,
        }),
    }),
}

_NESTED = {
    "world": WorldConfig,
    "training": TrainingSection,
    "reduction": ReductionConfig,
    "plan": PlanConfig,
    "attacks": AttackConfig,
    "evaluation": EvaluationConfig,
    "defense": DefenseConfig,
    "output": OutputConfig,
}


def _build(cls, data: dict):
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if f.name == "augmentation":
            v = AugmentationConfig(**v)
        elif f.name == "trees":
            v = TreeConfig(**v)
        elif f.name == "policies":
            v = [DefenseEntry(**p) for p in v]
        kw[f.name] = v
    return cls(**kw)


def _cross_checks(cfg: ExperimentConfig) -> None:
    w, t, p = cfg.world, cfg.training, cfg.plan
    if w.min_len > w.max_len:
        raise ConfigError("world.min_len must not exceed world.max_len")
    n_regular = (w.vocabulary_size - 1) // 2
    if w.n_components > n_regular - 1:
        raise ConfigError(
            f"world.vocabulary_size={w.vocabulary_size} supports at most {n_regular - 1} components"
        )
    total = w.per_component * w.n_components
    need = w.member_n + w.holdout_n + w.aux_member_n + w.aux_holdout_n
    if need > total:
        raise ConfigError(f"split sizes sum to {need} but the dataset has only {total} points")
    if t.beta_start > t.beta_end:
        raise ConfigError("training.beta_start must not exceed training.beta_end")
    if p.timesteps is not None and max(p.timesteps) > t.diffusion_steps:
        raise ConfigError("plan.timesteps exceed training.diffusion_steps")
    if p.window_width > t.diffusion_steps:
        raise ConfigError("plan.window_width exceeds training.diffusion_steps")
    props = cfg.reduction.proportions
    if list(props) != sorted(props):
        raise ConfigError("reduction.proportions must be sorted ascending")
    levels = cfg.evaluation.truncation_levels
    if 1.0 not in levels or 0.0 not in levels:
        raise ConfigError("evaluation.truncation_levels must include 1.0 (full) and 0.0 (null)")
    if cfg.evaluation.samples_per_condition <= w.dim and "toy_fid" in cfg.evaluation.assumption_metrics:
        raise ConfigError("evaluation.samples_per_condition must exceed world.dim for toy_fid")
    if cfg.evaluation.utility_samples_per_condition <= w.dim:
        raise ConfigError("evaluation.utility_samples_per_condition must exceed world.dim")


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"schema error at {where}: {e.message}") from None
    kw = {k: data[k] for k in ("seed", "out_dir") if k in data}
    for name, cls in _NESTED.items():
        if name in data:
            kw[name] = _build(cls, data[name])
    try:
        cfg = ExperimentConfig(**kw)
        cfg.training.augmentation.policy()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    _cross_checks(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return config_from_dict(data)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n"
