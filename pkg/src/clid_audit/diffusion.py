"""Conditional DDPM on real vectors: noise schedule, token embedder, MLP noise
predictor with hand-written backprop, ancestral sampling and checkpoint I/O."""

from __future__ import annotations

import base64
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_FORMAT = "clid-audit-checkpoint"
CHECKPOINT_VERSION = 1

# Rows are evaluated in zero-padded blocks of this size so that a row's output
# never depends on which other rows share the call (BLAS gemv != gemm bitwise).
EVAL_BLOCK = 64


class DivergenceError(RuntimeError):
    """Raised when training or sampling produces non-finite values."""


# --------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    sigma_mode: str = "beta"

    @property
    def total_steps(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_mode": self.sigma_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_linear_schedule(
            d["total_steps"], d["beta_start"], d["beta_end"], d["sigma_mode"]
        )


def make_linear_schedule(
    total_steps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.05,
    sigma_mode: str = "beta",
) -> NoiseSchedule:
    """Linearly spaced betas (endpoints included) with running-product alpha bars.

    ``sigma_mode="beta"`` uses sigma_t^2 = beta_t, ``"posterior"`` uses the
    posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    """
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if sigma_mode not in ("beta", "posterior"):
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    betas = np.linspace(beta_start, beta_end, int(total_steps))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma_mode == "beta":
        sigmas = np.sqrt(betas)
    else:
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        sigma_mode=sigma_mode,
    )


def _check_timesteps(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise ValueError("timesteps must be integers")
        t = t.astype(np.int64)
    if t.size and (t.min() < 1 or t.max() > schedule.total_steps):
        raise ValueError(f"timestep out of range [1, {schedule.total_steps}]")
    return t


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Works on a single vector or on row-stacked batches with one timestep per row.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = _check_timesteps(t, schedule)
    abar = schedule.alpha_bars[t - 1]
    if x0.ndim == 2:
        abar = np.broadcast_to(abar, (x0.shape[0],))[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


# --------------------------------------------------------------------------
# condition embedder


@dataclass(eq=False)
class ConditionEmbedder:
    """Frozen lookup table; a sequence embeds to the mean of its token rows.

    Token layout: 0 is the pad token (zero row), ``1..n_regular`` are regular
    tokens and ``n_regular+1..2*n_regular`` their reserved synonyms.
    """

    table: np.ndarray
    n_regular: int
    pad_token_id: int = 0
    null_sequence: tuple = ()

    @property
    def vocabulary_size(self) -> int:
        return self.table.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.table.shape[1]

    @property
    def regular_tokens(self) -> range:
        return range(1, self.n_regular + 1)

    def synonym_of(self, token: int) -> int:
        if token not in self.regular_tokens:
            raise ValueError(f"token {token} has no reserved synonym")
        return token + self.n_regular

    def embed(self, seq: Sequence[int]) -> np.ndarray:
        seq = tuple(int(s) for s in seq)
        if not seq:
            return np.zeros(self.embedding_dim)
        if min(seq) < 0 or max(seq) >= self.vocabulary_size:
            raise ValueError(f"token id outside vocabulary in {seq}")
        return self.table[list(seq)].mean(axis=0)

    def embed_many(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        if not len(seqs):
            return np.zeros((0, self.embedding_dim))
        return np.stack([self.embed(s) for s in seqs])

    def to_dict(self) -> dict:
        return {
            "pad_token_id": self.pad_token_id,
            "n_regular": self.n_regular,
            "table": encode_array(self.table),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionEmbedder":
        return cls(
            table=decode_array(d["table"]),
            n_regular=d["n_regular"],
            pad_token_id=d["pad_token_id"],
        )


def make_embedder(
    vocabulary_size: int = 32,
    embedding_dim: int = 16,
    seed: int = 0,
    synonym_similarity: float = 0.8,
) -> ConditionEmbedder:
    if vocabulary_size < 3 or embedding_dim < 1:
        raise ValueError("vocabulary needs at least pad, one token and its synonym")
    if not 0.0 <= synonym_similarity <= 1.0:
        raise ValueError("synonym_similarity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_regular = (vocabulary_size - 1) // 2
    table = rng.standard_normal((vocabulary_size, embedding_dim))
    table[0] = 0.0
    fresh = table[n_regular + 1 : 2 * n_regular + 1]
    s = synonym_similarity
    table[n_regular + 1 : 2 * n_regular + 1] = (
        s * table[1 : n_regular + 1] + math.sqrt(1.0 - s * s) * fresh
    )
    return ConditionEmbedder(table=table, n_regular=n_regular)


# --------------------------------------------------------------------------
# noise predictor


def timestep_encoding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if enc.shape[1] < dim:
        enc = np.concatenate([enc, np.zeros((len(t), dim - enc.shape[1]))], axis=1)
    return enc


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


class QueryCounter:
    """Thread-safe count of noise-prediction rows evaluated."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.value = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.value += n

    def reset(self) -> None:
        with self._lock:
            self.value = 0


class DenoiserNet:
    """MLP eps_theta(x_t, t, c) over [x_t, sinusoidal(t), embed(c)].

    Parameters live in one flat float64 vector; layers are views into it.
    """

    def __init__(
        self,
        data_dim: int,
        cond_dim: int,
        hidden: Sequence[int] = (128, 128, 128),
        time_dim: int = 16,
        params: np.ndarray | None = None,
        seed: int = 0,
        zero_output: bool = False,
    ) -> None:
        self.data_dim = int(data_dim)
        self.cond_dim = int(cond_dim)
        self.time_dim = int(time_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.layer_widths = [self.input_dim, *self.hidden, self.data_dim]
        self._shapes = [
            (a, b) for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:])
        ]
        n = sum(a * b + b for a, b in self._shapes)
        if params is None:
            params = self._init_params(seed, zero_output)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.queries = QueryCounter()

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.cond_dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def _init_params(self, seed: int, zero_output: bool) -> np.ndarray:
        rng = np.random.default_rng(seed)
        chunks = []
        for i, (a, b) in enumerate(self._shapes):
            last = i == len(self._shapes) - 1
            if last and zero_output:
                w = np.zeros((a, b))
            else:
                w = rng.standard_normal((a, b)) / math.sqrt(a)
            chunks += [w.ravel(), np.zeros(b)]
        return np.concatenate(chunks)

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in self._shapes:
            w = p[off : off + a * b].reshape(a, b)
            off += a * b
            out.append((w, p[off : off + b]))
            off += b
        return out

    def _inputs(self, x_t, t, c_embed) -> np.ndarray:
        return np.concatenate([x_t, timestep_encoding(t, self.time_dim), c_embed], axis=1)

    def _mlp(self, z: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        layers = self.layers(params)
        h = z
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = _silu(h)
        return h

    def forward(self, x_t, t, c_embed) -> np.ndarray:
        """Batched prediction; rows are independent and bitwise reproducible."""
        z = self._inputs(x_t, t, c_embed)
        n = z.shape[0]
        self.queries.add(n)
        out = np.empty((n, self.data_dim))
        for s in range(0, n, EVAL_BLOCK):
            blk = z[s : s + EVAL_BLOCK]
            m = blk.shape[0]
            if m < EVAL_BLOCK:
                blk = np.concatenate([blk, np.zeros((EVAL_BLOCK - m, z.shape[1]))])
            out[s : s + m] = self._mlp(blk)[:m]
        return out

    def loss_and_grad(self, x_t, t, c_embed, eps, params: np.ndarray | None = None):
        """Mean over rows of ||eps_theta - eps||^2 and its gradient w.r.t. params."""
        p = self.params if params is None else params
        layers = self.layers(p)
        h = self._inputs(x_t, t, c_embed)
        pre, sig, acts = [], [], [h]
        for i, (w, b) in enumerate(layers):
            a = h @ w + b
            if i < len(layers) - 1:
                s = _sigmoid(a)
                pre.append(a)
                sig.append(s)
                h = a * s
            else:
                h = a
            acts.append(h)
        resid = h - eps
        batch = x_t.shape[0]
        loss = float(np.sum(resid * resid) / batch)

        grads = []
        delta = 2.0 * resid / batch
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                a, s = pre[i - 1], sig[i - 1]
                delta = (delta @ w.T) * (s * (1.0 + a * (1.0 - s)))
        grads.reverse()
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return loss, flat

    def copy(self) -> "DenoiserNet":
        net = DenoiserNet(
            self.data_dim, self.cond_dim, self.hidden, self.time_dim, params=self.params.copy()
        )
        return net

    def config(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "cond_dim": self.cond_dim,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
        }


def predict_eps(model: DenoiserNet, x_t, t, c_embed) -> np.ndarray:
    """Evaluate eps_theta for one vector or a row-stacked batch."""
    x_t = np.asarray(x_t, dtype=float)
    c_embed = np.asarray(c_embed, dtype=float)
    single = x_t.ndim == 1
    if single:
        x_t = x_t[None]
    n = x_t.shape[0]
    if c_embed.ndim == 1:
        c_embed = np.broadcast_to(c_embed, (n, c_embed.shape[0]))
    if x_t.shape[1] != model.data_dim:
        raise ValueError(f"x_t has dim {x_t.shape[1]}, model expects {model.data_dim}")
    if c_embed.shape != (n, model.cond_dim):
        raise ValueError(
            f"condition embedding shape {c_embed.shape}, expected ({n}, {model.cond_dim})"
        )
    t = np.broadcast_to(np.asarray(t), (n,))
    out = model.forward(x_t, t, c_embed)
    return out[0] if single else out


def diffusion_loss(
    model: DenoiserNet,
    x0,
    c_embed,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    params: np.ndarray | None = None,
):
    """Monte Carlo diffusion loss with t ~ U{1..T}, eps ~ N(0, I); returns (loss, grad)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    c_embed = np.atleast_2d(np.asarray(c_embed, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if c_embed.shape[0] != x0.shape[0]:
        raise ValueError("batch of x and condition embeddings differ in length")
    t = rng.integers(1, schedule.total_steps + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, t, eps, schedule)
    return model.loss_and_grad(x_t, t, c_embed, eps, params=params)


def sample_ddpm(
    model: DenoiserNet,
    c_embed,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n: int | None = None,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I); no noise is added at the last step.

    Returns one vector, or ``(n, d)`` when ``n`` is given.
    """
    c_embed = np.asarray(c_embed, dtype=float)
    rows = 1 if n is None else int(n)
    if c_embed.ndim == 1:
        c_embed = np.broadcast_to(c_embed, (rows, c_embed.shape[0]))
    if c_embed.shape != (rows, model.cond_dim):
        raise ValueError("condition embedding incompatible with model")
    x = rng.standard_normal((rows, model.data_dim))
    for t in range(schedule.total_steps, 0, -1):
        eps = predict_eps(model, x, t, c_embed)
        beta = schedule.betas[t - 1]
        mean = (x - beta / math.sqrt(1.0 - schedule.alpha_bars[t - 1]) * eps) / math.sqrt(
            schedule.alphas[t - 1]
        )
        if t > 1:
            x = mean + schedule.sigmas[t - 1] * rng.standard_normal(x.shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample at timestep {t}")
    return x[0] if n is None else x


# --------------------------------------------------------------------------
# checkpoints


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "dtype": "<f8",
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    if d["dtype"] != "<f8":
        raise ValueError(f"unsupported dtype {d['dtype']}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


@dataclass(eq=False)
class ModelCheckpoint:
    step: int
    params: np.ndarray
    net_config: dict
    schedule: NoiseSchedule
    embedder: ConditionEmbedder
    seed_lineage: list = field(default_factory=list)
    optimizer_state: dict | None = None
    train_loss: float | None = None

    def model(self) -> DenoiserNet:
        cfg = self.net_config
        return DenoiserNet(
            cfg["data_dim"],
            cfg["cond_dim"],
            cfg["hidden"],
            cfg["time_dim"],
            params=self.params.copy(),
        )

    def to_dict(self) -> dict:
        opt = None
        if self.optimizer_state is not None:
            opt = {
                "t": self.optimizer_state["t"],
                "m": encode_array(self.optimizer_state["m"]),
                "v": encode_array(self.optimizer_state["v"]),
            }
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "net": self.net_config,
            "layer_widths": [
                self.net_config["data_dim"]
                + self.net_config["time_dim"]
                + self.net_config["cond_dim"],
                *self.net_config["hidden"],
                self.net_config["data_dim"],
            ],
            "params": encode_array(self.params),
            "schedule": self.schedule.to_dict(),
            "embedder": self.embedder.to_dict(),
            "seed_lineage": list(self.seed_lineage),
            "optimizer": opt,
            "train_loss": self.train_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCheckpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a checkpoint file")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        opt = d.get("optimizer")
        if opt is not None:
            opt = {"t": opt["t"], "m": decode_array(opt["m"]), "v": decode_array(opt["v"])}
        return cls(
            step=d["step"],
            params=decode_array(d["params"]),
            net_config=d["net"],
            schedule=NoiseSchedule.from_dict(d["schedule"]),
            embedder=ConditionEmbedder.from_dict(d["embedder"]),
            seed_lineage=d.get("seed_lineage", []),
            optimizer_state=opt,
            train_loss=d.get("train_loss"),
        )


def save_checkpoint(path, ckpt: ModelCheckpoint) -> Path:
    path = Path(path)
    path.write_text(json.dumps(ckpt.to_dict(), sort_keys=True))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.from_dict(json.loads(Path(path).read_text()))
