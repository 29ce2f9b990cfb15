"""Gaussian DDPM over encoded tabular rows.

The denoiser is an MLP on ``[x_t, emb(t)]`` predicting the injected noise.
Deterministic DDIM steps (``ddim_forward_step`` / ``ddim_backward_step``) are
provided for the SecMI t-error attack.

Index convention: timesteps are ``0..T-1`` and ``alpha_bar[t]`` is the
cumulative signal coefficient *after* applying step ``t``, so even ``t=0``
carries a little noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    AdamState,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam_step,
    init_mlp,
    load_params,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    save_params,
)

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("need at least one timestep")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        return cls(int(beta.size), beta, np.cumprod(1.0 - beta))

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"timestep {t.tolist()} outside [0, {self.T})")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at octave frequencies ``pi * 2**k``.

    Returns shape ``(n, dim)`` for array ``t``; ``dim`` must be even.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserParams:
    mlp: MlpParams
    input_dim: int
    T: int
    embed_dim: int = 16

    def __post_init__(self):
        if self.mlp.layer_sizes[0] != self.input_dim + self.embed_dim:
            raise ShapeError("denoiser input size must be d + embed_dim")
        if self.mlp.layer_sizes[-1] != self.input_dim:
            raise ShapeError("denoiser output size must be d")

    def net_input(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return np.concatenate([x, time_embedding(t, self.T, self.embed_dim)], axis=1)

    def predict(self, x, t) -> np.ndarray:
        """Predicted noise for ``x`` (vector or batch) at timestep(s) ``t``."""
        single = np.ndim(x) == 1
        out = mlp_forward(self.mlp, self.net_input(x, t), row_exact=True)
        return out[0] if single else out


def init_denoiser(d: int, T: int, rng: np.random.Generator, hidden=(128, 128), embed_dim: int = 16) -> DenoiserParams:
    mlp = init_mlp([d + embed_dim, *hidden, d], rng, activation="relu", output_head="linear")
    return DenoiserParams(mlp, d, T, embed_dim)


def forward_diffuse(x0, eps, t, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`` (broadcasts over rows when ``t`` is an array)."""
    schedule.check_t(t)
    ab = schedule.alpha_bar[np.asarray(t)]
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape[-1] != eps.shape[-1]:
        raise ShapeError("x0 and eps lengths differ")
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(model, x0, eps, t, schedule: NoiseSchedule):
    """Squared L2 error (summed over coordinates) of the noise prediction.

    Scalar for a single record, one value per row for a batch.
    """
    xt = forward_diffuse(x0, eps, t, schedule)
    pred = model.predict(xt, t)
    diff = pred - np.asarray(eps, dtype=np.float64)
    loss = np.sum(diff * diff, axis=-1)
    if not np.all(np.isfinite(loss)):
        raise NonFiniteError("non-finite diffusion loss")
    return loss


@dataclass
class TrainConfig:
    steps: int = 4000
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: list = field(default_factory=lambda: [128, 128])
    embed_dim: int = 16


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int):
        super().__init__(f"diffusion loss became non-finite at step {step}")
        self.step = step


def train_denoiser(data, schedule: NoiseSchedule, cfg: TrainConfig, init: DenoiserParams | None = None):
    """Minimise the batch-mean diffusion loss with Adam.

    Each step draws a batch (without replacement, or the whole set when it is
    smaller than ``cfg.batch``), a uniform timestep per row and fresh noise.

    Returns:
        ``(params, losses)`` where ``losses`` holds the per-step batch mean.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D array")
    n, d = data.shape
    rng = np.random.default_rng(cfg.seed)
    params = init if init is not None else init_denoiser(d, schedule.T, rng, cfg.hidden, cfg.embed_dim)
    mlp = params.mlp
    state = AdamState.zeros_like(mlp, lr=cfg.lr)
    sqrt_ab = np.sqrt(schedule.alpha_bar)
    sqrt_1m = np.sqrt(1.0 - schedule.alpha_bar)
    losses = []
    for step in range(cfg.steps):
        if n <= cfg.batch:
            x0 = data
        else:
            x0 = data[rng.choice(n, size=cfg.batch, replace=False)]
        b = x0.shape[0]
        t = rng.integers(0, schedule.T, size=b)
        eps = rng.standard_normal((b, d))
        xt = sqrt_ab[t, None] * x0 + sqrt_1m[t, None] * eps
        inp = params.net_input(xt, t)
        pred, cache = mlp_forward_cached(mlp, inp)
        diff = pred - eps
        loss = float(np.sum(diff * diff) / b)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        losses.append(loss)
        grads = mlp_backward(mlp, inp, 2.0 * diff / b, cache=cache)
        mlp, state = adam_step(mlp, grads, state)
        params = DenoiserParams(mlp, d, schedule.T, params.embed_dim)
    return params, np.asarray(losses)


def _posterior_sigma(schedule: NoiseSchedule, t: int) -> float:
    if t == 0:
        return 0.0
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    return float(np.sqrt(schedule.beta[t] * (1.0 - ab_prev) / (1.0 - ab)))


def sample(model, schedule: NoiseSchedule, n: int, seed: int, d: int | None = None) -> np.ndarray:
    """Ancestral DDPM sampling from ``T-1`` down to ``0``.

    Uses the posterior mean with predicted noise and the posterior standard
    deviation ``sqrt(beta_t (1 - ab_{t-1}) / (1 - ab_t))`` for ``t > 0``.
    """
    d = d if d is not None else model.input_dim
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    if n == 0:
        return x
    for t in range(schedule.T - 1, -1, -1):
        beta = schedule.beta[t]
        ab = schedule.alpha_bar[t]
        eps = model.predict(x, t)
        x = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)
        if t > 0:
            x = x + _posterior_sigma(schedule, t) * rng.standard_normal((n, d))
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sampler state at t={t}")
    return x


def _ddim_move(x, eps, ab_from, ab_to):
    x0_hat = (x - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps


def ddim_forward_step(model, x, t: int, schedule: NoiseSchedule, stride: int = 1, return_eps: bool = False):
    """Deterministic DDIM step from level ``t`` to ``t + stride`` (phi)."""
    if t < 0 or t + stride >= schedule.T:
        raise IndexError(f"forward step from t={t} leaves [0, {schedule.T})")
    eps = model.predict(x, t)
    out = _ddim_move(x, eps, schedule.alpha_bar[t], schedule.alpha_bar[t + stride])
    return (out, eps) if return_eps else out


def ddim_backward_step(model, x_next, t: int, schedule: NoiseSchedule, stride: int = 1, eps=None):
    """Deterministic DDIM step from level ``t + stride`` back to ``t`` (psi).

    By default the noise is re-predicted at ``(x_next, t + stride)``; pass the
    ``eps`` cached from the matching forward step to get an exact inverse.
    """
    if t < 0 or t + stride >= schedule.T:
        raise IndexError(f"backward step to t={t} leaves [0, {schedule.T})")
    if eps is None:
        eps = model.predict(x_next, t + stride)
    return _ddim_move(x_next, eps, schedule.alpha_bar[t + stride], schedule.alpha_bar[t])


def iterated_forward(model, x0, t: int, schedule: NoiseSchedule, stride: int = 1) -> np.ndarray:
    """Compose forward DDIM steps 0 -> stride -> ... until level ``t`` (Phi)."""
    if t < 0 or t >= schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    if t % stride:
        raise ValueError("t must be a multiple of the stride")
    x = np.asarray(x0, dtype=np.float64)
    for s in range(0, t, stride):
        x = ddim_forward_step(model, x, s, schedule, stride)
    return x


def save_denoiser(params: DenoiserParams, schedule_meta: dict, ckpt_path, meta_path) -> None:
    """Write the TMLP checkpoint plus its JSON sidecar."""
    save_params(params.mlp, ckpt_path)
    meta = dict(schedule_meta)
    meta.update(d=params.input_dim, embed_dim=params.embed_dim, T=params.T)
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_denoiser(ckpt_path, meta_path) -> tuple[DenoiserParams, dict]:
    with open(meta_path) as fh:
        meta = json.load(fh)
    mlp = load_params(ckpt_path)
    return DenoiserParams(mlp, int(meta["d"]), int(meta["T"]), int(meta["embed_dim"])), meta


def schedule_meta(T, beta_start, beta_end, seed) -> dict:
    return {"T": T, "beta_start": beta_start, "beta_end": beta_end, "seed": seed}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
