"""Seeded, resumable training loop for the conditional denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    ConditionEmbedder,
    DenoiserNet,
    DivergenceError,
    ModelCheckpoint,
    NoiseSchedule,
    forward_diffuse,
)
from .worlds import AugmentationPolicy, ToyDataset, augment_batch


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    total_steps: int = 2000
    checkpoint_every: int = 500
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy.disabled)
    cond_drop_prob: float = 0.1
    rng_seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1)")

    def checkpoint_steps(self, start: int = 0) -> list[int]:
        steps = set(range(0, self.total_steps + 1, self.checkpoint_every))
        steps.add(self.total_steps)
        return sorted(s for s in steps if s >= start)


class Adam:
    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * (grad * grad)
        denom = np.sqrt(self.v)
        denom /= np.sqrt(1 - self.b2**self.t)
        denom += self.eps
        params -= (self.lr / (1 - self.b1**self.t)) * self.m / denom

    def state(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy()}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = np.array(state["m"], dtype=float)
        self.v = np.array(state["v"], dtype=float)


def train(
    model: DenoiserNet,
    dataset: ToyDataset,
    config: TrainingConfig,
    schedule: NoiseSchedule,
    embedder: ConditionEmbedder,
    *,
    resume_from: ModelCheckpoint | None = None,
    loss_log: list | None = None,
    batch_log: list | None = None,
    on_checkpoint=None,
) -> list[ModelCheckpoint]:
    """Adam on the diffusion loss; returns checkpoints (step 0 and final included).

    Every step draws from its own generator seeded by (rng_seed, step), so a
    run resumed from any checkpoint reproduces the uninterrupted run exactly.
    ``model.params`` is updated in place. ``on_checkpoint`` is called with each
    checkpoint as soon as it is taken.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    xs = dataset.xs
    cembs = embedder.embed_many(dataset.conds)
    opt = Adam(model.n_params, config.learning_rate, config.adam_betas, config.adam_eps)
    start = 0
    if resume_from is not None:
        start = resume_from.step
        model.params[:] = resume_from.params
        if resume_from.optimizer_state is not None:
            opt.load(resume_from.optimizer_state)
    lineage = [config.rng_seed]

    def snapshot(step, window):
        ck = ModelCheckpoint(
            step=step,
            params=model.params.copy(),
            net_config=model.config(),
            schedule=schedule,
            embedder=embedder,
            seed_lineage=lineage,
            optimizer_state=opt.state(),
            train_loss=float(np.mean(window)) if window else None,
        )
        if on_checkpoint is not None:
            on_checkpoint(ck)
        return ck

    marks = set(config.checkpoint_steps(start))
    out = []
    if start in marks and resume_from is None:
        out.append(snapshot(start, []))
    window: list[float] = []
    n, T = len(dataset), schedule.total_steps
    for step in range(start, config.total_steps):
        rng = np.random.default_rng([config.rng_seed, step])
        idx = rng.integers(0, n, size=config.batch_size)
        if batch_log is not None:
            batch_log.append(idx)
        x0 = augment_batch(xs[idx], config.augmentation, rng)
        c = cembs[idx]
        if config.cond_drop_prob > 0:
            c = np.where((rng.random(len(idx)) < config.cond_drop_prob)[:, None], 0.0, c)
        t = rng.integers(1, T + 1, size=len(idx))
        eps = rng.standard_normal(x0.shape)
        loss, grad = model.loss_and_grad(forward_diffuse(x0, t, eps, schedule), t, c, eps)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        opt.step(model.params, grad)
        window.append(loss)
        if loss_log is not None:
            loss_log.append(loss)
        if step + 1 in marks:
            out.append(snapshot(step + 1, window))
            window = []
    return out
