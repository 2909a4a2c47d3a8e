"""Noise schedules, guided noise prediction, reverse steps and denoiser training.

Timesteps are 1-based throughout: ``t = 1`` is the least noisy level and
``t = T_max`` the noisiest. Array index ``t - 1`` holds the values for step t.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

logger = logging.getLogger(__name__)

LATENT_DIM = 12
COND_DIM = 32
T_EMB_DIM = 16


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    # Training-schedule step each entry corresponds to; identity for a base schedule.
    timesteps: np.ndarray

    @property
    def T_max(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t):
        if not 1 <= t <= self.T_max:
            raise ValueError(f"step {t} outside 1..{self.T_max}")

    def digest(self) -> str:
        return hashlib.sha256(np.asarray(self.betas, dtype="<f8").tobytes()).hexdigest()[:16]


def build_schedule(T_max: int = 50, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    """Linear beta schedule with exact cumulative products."""
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_max) if T_max > 1 else np.array([beta_start])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas), np.arange(1, T_max + 1))


def respace(sched: NoiseSchedule, T: int) -> NoiseSchedule:
    """Evenly strided T-step subsequence ending at T_max.

    Each retained step gets the effective variance of jumping between its
    neighbours, so the subsequence's cumulative products match the base
    schedule at the retained steps.
    """
    if not 1 <= T <= sched.T_max:
        raise ValueError(f"T={T} outside 1..{sched.T_max}")
    steps = np.unique(np.round(np.linspace(sched.T_max / T, sched.T_max, T)).astype(int))
    if len(steps) != T:
        raise ValueError(f"cannot stride {sched.T_max} steps into {T}")
    ab = sched.alpha_bars[steps - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / prev
    return NoiseSchedule(betas, np.cumprod(1.0 - betas), steps)


def forward_noise(z0, t: int, eps, sched: NoiseSchedule):
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def renoise_one_step(z_prev, t: int, sched: NoiseSchedule, rng):
    """Sample q(z_t | z_{t-1}): variance beta_t."""
    beta = sched.beta(t)
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * rng.standard_normal(np.shape(z_prev))


def reverse_mean(z_t, t: int, eps_hat, sched: NoiseSchedule):
    beta = sched.beta(t)
    ab = sched.alpha_bar(t)
    return (np.asarray(z_t) - (beta / np.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / np.sqrt(1.0 - beta)


def reverse_step(z_t, t: int, eps_hat, sched: NoiseSchedule, rng):
    """One ancestral step with sigma_t^2 = beta_t; the t = 1 step adds no noise."""
    if t < 1:
        raise ValueError("t must be >= 1")
    mu = reverse_mean(z_t, t, eps_hat, sched)
    if t == 1:
        return mu
    return mu + np.sqrt(sched.beta(t)) * rng.standard_normal(np.shape(mu))


# --------------------------------------------------------------------------
# guidance curve


@dataclass(frozen=True)
class GuidanceCurveParams:
    a: float = 2.0
    b: float = 2.0
    g_min: float = 7.0
    g_max: float = 11.0
    M: int = 16

    def __post_init__(self):
        if self.a < 1 or self.b < 1:
            raise ValueError("shape exponents must be >= 1")
        if self.g_min > self.g_max:
            raise ValueError("g_min must not exceed g_max")
        if self.M < 2:
            raise ValueError("M must be >= 2")


def _kernel(x, a, b):
    return np.power(x, a - 1.0) * np.power(1.0 - x, b - 1.0)


def guidance_curve(m: int, p: GuidanceCurveParams) -> float:
    """Beta-shaped guidance, rescaled so its peak reaches ``g_max``."""
    if not 1 <= m <= p.M:
        raise ValueError(f"frame index {m} outside 1..{p.M}")
    mode = (p.a - 1.0) / (p.a + p.b - 2.0) if p.a + p.b > 2.0 else 0.5
    k_max = _kernel(mode, p.a, p.b)
    return float(p.g_min + (p.g_max - p.g_min) * _kernel(m / p.M, p.a, p.b) / k_max)


# --------------------------------------------------------------------------
# denoiser


def timestep_embedding(t, T_max: int, dim: int = T_EMB_DIM):
    t = np.atleast_1d(np.asarray(t, dtype=float)) / T_max
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def context_summary(ctx, pos=None):
    """(n, K_q, d) noised context slots -> (n, 2d + 1): last slot, slot mean, frame position in [0, 1]."""
    ctx = np.asarray(ctx, dtype=float)
    n = ctx.shape[0]
    pos = np.zeros(n) if pos is None else np.broadcast_to(np.asarray(pos, dtype=float), (n,))
    return np.concatenate([ctx[:, -1, :], ctx.mean(axis=1), pos[:, None]], axis=1)


@dataclass
class DenoiserParams:
    weights: dict
    d_z: int = LATENT_DIM
    d_c: int = COND_DIM
    d_ctx: int = 2 * LATENT_DIM + 1
    hidden: tuple = (128, 128)
    T_max: int = 50
    n_calls: int = field(default=0, compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def input_dim(self) -> int:
        return self.d_z + self.d_ctx + T_EMB_DIM + self.d_c + self.d_z + 1


def init_denoiser(rng, d_z=LATENT_DIM, d_c=COND_DIM, d_ctx=2 * LATENT_DIM + 1, hidden=(128, 128), T_max=50):
    p = DenoiserParams({}, d_z, d_c, d_ctx, tuple(hidden), T_max)
    p.weights = nn.init_mlp([p.input_dim, *hidden, d_z], rng, out_scale=0.1)
    return p


def _features(theta: DenoiserParams, z_t, t, c, r, ctx, null):
    n = z_t.shape[0]
    c = np.broadcast_to(np.asarray(c, dtype=float), (n, theta.d_c))
    r = np.broadcast_to(np.asarray(r, dtype=float), (n, theta.d_z))
    null = np.broadcast_to(np.asarray(null, dtype=float).reshape(-1, 1), (n, 1))
    if ctx is None:
        ctx = np.zeros((n, theta.d_ctx))
    temb = np.broadcast_to(timestep_embedding(t, theta.T_max), (n, T_EMB_DIM))
    keep = 1.0 - null
    return np.concatenate([z_t, ctx, temb, c * keep, r * keep, null], axis=1)


def denoiser_forward(theta: DenoiserParams, z_t, t, c, r, ctx=None, null=0.0, cache=False):
    """Predicted noise; ``null=1`` selects the reserved unconditional embedding."""
    z_t = np.atleast_2d(np.asarray(z_t, dtype=float))
    if z_t.shape[1] != theta.d_z:
        raise ValueError(f"latent dim {z_t.shape[1]} != {theta.d_z}")
    x = _features(theta, z_t, t, c, r, ctx, null)
    theta.n_calls += 1
    out, cch = nn.mlp_forward(theta.weights, x, theta.n_layers)
    return (out, cch) if cache else out


def predict_guided(z_t, t, c, r, g, theta: DenoiserParams, ctx=None):
    """eps(z, null) + g * (eps(z, c, r) - eps(z, null))."""
    z_t = np.atleast_2d(np.asarray(z_t, dtype=float))
    n = z_t.shape[0]
    zz = np.concatenate([z_t, z_t])
    cc = None if ctx is None else np.concatenate([ctx, ctx])
    c = np.asarray(c, dtype=float)
    r = np.asarray(r, dtype=float)
    if c.ndim == 2:
        c = np.concatenate([c, c])
    if r.ndim == 2:
        r = np.concatenate([r, r])
    null = np.concatenate([np.zeros(n), np.ones(n)])
    out = denoiser_forward(theta, zz, t, c, r, cc, null)
    # one batched call evaluates both branches
    theta.n_calls += 1
    cond, uncond = out[:n], out[n:]
    return uncond + g * (cond - uncond)


def denoiser_loss_and_grads(theta: DenoiserParams, z_t, t, c, r, ctx, null, eps):
    out, cch = denoiser_forward(theta, z_t, t, c, r, ctx, null, cache=True)
    diff = out - eps
    n = diff.shape[0]
    loss = float(np.sum(diff * diff) / n)
    grads = nn.mlp_backward(theta.weights, cch, 2.0 * diff / n, theta.n_layers)
    return loss, grads


@dataclass
class DenoiserTrainingSet:
    """Targets with their clean context slots and conditions."""

    z0: np.ndarray  # (N, d_z)
    ctx0: np.ndarray  # (N, K_q, d_z)
    c: np.ndarray  # (N, d_c)
    r: np.ndarray  # (N, d_z)
    pos: np.ndarray | None = None  # (N,) frame position in [0, 1]

    def __post_init__(self):
        if self.pos is None:
            self.pos = np.zeros(len(self.z0))

    def __len__(self):
        return len(self.z0)


@dataclass
class DenoiserTrainConfig:
    epochs: int = 600
    lr: float = 2e-3
    batch_size: int = 256
    cond_dropout: float = 0.1
    hidden: tuple = (128, 128)


def train_denoiser(data: DenoiserTrainingSet, sched: NoiseSchedule, config: DenoiserTrainConfig, rng,
                   theta: DenoiserParams | None = None):
    """Minimise E||eps - eps_theta(z_t, t, ...)||^2 with Adam. Returns (theta, epoch losses)."""
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    if theta is None:
        theta = init_denoiser(rng, data.z0.shape[1], data.c.shape[1], 2 * data.z0.shape[1] + 1,
                              config.hidden, sched.T_max)
    opt = nn.Adam(config.lr)
    history = []
    sqrt_ab = np.sqrt(sched.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bars)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            b = len(idx)
            t = rng.integers(1, sched.T_max + 1, size=b)
            eps = rng.standard_normal((b, data.z0.shape[1]))
            ctx_eps = rng.standard_normal(data.ctx0[idx].shape)
            a, s = sqrt_ab[t - 1][:, None], sqrt_1mab[t - 1][:, None]
            z_t = a * data.z0[idx] + s * eps
            ctx = context_summary(a[:, :, None] * data.ctx0[idx] + s[:, :, None] * ctx_eps, data.pos[idx])
            null = (rng.random(b) < config.cond_dropout).astype(float)
            loss, grads = denoiser_loss_and_grads(theta, z_t, t, data.c[idx], data.r[idx], ctx, null, eps)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite denoiser loss at epoch {epoch}, batch offset {start}")
            opt.step(theta.weights, grads)
            total += loss * b
        history.append(total / n)
        if epoch % 50 == 0:
            logger.debug("denoiser epoch %d loss %.5f", epoch, history[-1])
    return theta, history
