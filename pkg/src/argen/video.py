"""Autoregressive clip sampler over a sliding queue of context latents.

Every clip owns its random stream. All of the noise a clip will consume is
drawn up front in a fixed layout, so a clip is determined by its seed,
reference, condition and action whether it is generated alone or inside a
batch sharing the same number of steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (DenoiserParams, GuidanceCurveParams, NoiseSchedule, context_summary, forward_noise,
                        guidance_curve, predict_guided, renoise_one_step, respace, reverse_mean, reverse_step)
from .face import AU_MAX_RENDER, render_latent
from .labels import N_IDENTITY

logger = logging.getLogger(__name__)

K_QUEUE = 8
# moves smaller than this (sampling noise around an inactive AU) are not counted as clamps
CLAMP_TOL = 0.05


@dataclass
class FrameQueue:
    latents: np.ndarray  # (K_q, d)

    @classmethod
    def repeat(cls, z0, K_q: int = K_QUEUE):
        if K_q < 1:
            raise ValueError("queue length must be >= 1")
        return cls(np.tile(np.asarray(z0, dtype=float), (K_q, 1)))

    @property
    def K_q(self) -> int:
        return len(self.latents)

    def push(self, z):
        """Append at the back, drop the front."""
        self.latents = np.concatenate([self.latents[1:], np.asarray(z, dtype=float)[None]], axis=0)


def invert_queue(queue: FrameQueue, t: int, sched: NoiseSchedule, rng=None, eps=None):
    """Noise every slot independently to level t."""
    if eps is None:
        eps = rng.standard_normal(queue.latents.shape)
    return forward_noise(queue.latents, t, eps, sched)


def init_inverted_queue(z0, K_q: int, t: int, sched: NoiseSchedule, rng):
    """Queue of K_q copies of z0 noised to level t, plus the new frame's start (copy of the last slot)."""
    queue = FrameQueue.repeat(z0, K_q)
    noised = FrameQueue(invert_queue(queue, t, sched, rng))
    return noised, noised.latents[-1].copy()


@dataclass
class ClipCondition:
    c: np.ndarray
    r: np.ndarray


def frame_position(m: int, M: int) -> float:
    """0-based frame index mapped to [0, 1]."""
    return m / (M - 1) if M > 1 else 0.0


def _guided(theta, z_new, t, sched, cond_c, cond_r, g, ctx_noised, pos=None):
    t_model = int(sched.timesteps[t - 1])
    return predict_guided(z_new, t_model, cond_c, cond_r, g, theta, ctx=context_summary(ctx_noised, pos))


def denoise_new_frame(queue: FrameQueue, z_new, t: int, m: int, cond: ClipCondition,
                      curve: GuidanceCurveParams, theta: DenoiserParams, sched: NoiseSchedule, rng,
                      g: float | None = None, pos=None):
    """One reverse step on the new frame with the context replaced by freshly noised clean slots.

    Returns ``(noised context, z_new at level t - 1)``.
    """
    ctx = invert_queue(queue, t, sched, rng)
    g = guidance_curve(m, curve) if g is None else g
    eps_hat = _guided(theta, np.atleast_2d(z_new), t, sched, cond.c, cond.r, g, ctx[None], pos)
    return ctx, reverse_step(np.atleast_2d(z_new), t, eps_hat, sched, rng)[0]


def resample_refine(body, t: int, U: int, theta: DenoiserParams, cond: ClipCondition, g: float,
                    sched: NoiseSchedule, rng, ctx_noised=None, pos=None):
    """U cycles of one-step re-noising back to level t followed by a guided reverse step."""
    if U < 0:
        raise ValueError("U must be >= 0")
    z = np.atleast_2d(np.asarray(body, dtype=float))
    if ctx_noised is None:
        ctx_noised = np.zeros((z.shape[0], K_QUEUE, z.shape[1]))
    for _ in range(U):
        z = renoise_one_step(z, t, sched, rng)
        eps_hat = _guided(theta, z, t, sched, cond.c, cond.r, g, ctx_noised, pos)
        z = reverse_step(z, t, eps_hat, sched, rng)
    return z if np.ndim(body) > 1 else z[0]


@dataclass
class VideoClip:
    latents: np.ndarray  # (M, d)
    frames: np.ndarray | None = field(default=None, repr=False)  # (M, H, W)
    meta: dict = field(default_factory=dict)
    clamp_count: int = 0

    @property
    def M(self):
        return len(self.latents)


def clamp_latent(z):
    """Clamp identity to [-1, 1] and AUs to [0, AU_MAX_RENDER]; returns (clamped, number of AU entries clamped)."""
    out = np.array(z, dtype=float)
    aus = out[..., N_IDENTITY:]
    n_clamped = int(np.count_nonzero((aus < -CLAMP_TOL) | (aus > AU_MAX_RENDER + CLAMP_TOL)))
    out[..., :N_IDENTITY] = np.clip(out[..., :N_IDENTITY], -1.0, 1.0)
    out[..., N_IDENTITY:] = np.clip(aus, 0.0, AU_MAX_RENDER)
    return out, n_clamped


@dataclass
class SamplerConfig:
    M: int = 16
    K_q: int = K_QUEUE
    U: int = 1
    g_min: float = 7.0
    g_max: float = 11.0
    clip_x0: bool = True
    render: bool = True
    H: int = 64
    W: int = 64


def clip_predicted_noise(z, t, eps_hat, sched: NoiseSchedule):
    """Project the implied clean latent onto the data box and return the matching noise estimate."""
    ab = sched.alpha_bar(t)
    x0 = (z - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    aus = np.clip(x0[:, N_IDENTITY:], 0.0, None)
    # rescale rather than clip the AU block so the ratios between AUs survive strong guidance
    aus = aus / np.maximum(1.0, aus.max(axis=1, keepdims=True))
    x0 = np.concatenate([np.clip(x0[:, :N_IDENTITY], -1.0, 1.0), aus], axis=1)
    return (z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def _draw_noise(rng, M, T, K_q, U, d):
    # per frame and step: K_q context slots, one reverse step, then (renoise, reverse) per cycle
    return rng.standard_normal((M, T, K_q + 1 + 2 * U, d))


def generate_clips(x0s, conds_c, conds_r, T: int, ab_pairs, theta: DenoiserParams, base_sched: NoiseSchedule,
                   rngs, config: SamplerConfig = SamplerConfig()):
    """Generate one clip per item, all sharing the step count T.

    ``x0s`` (n, d) references, ``conds_c`` (n, d_c), ``conds_r`` (n, d),
    ``ab_pairs`` n pairs of guidance-curve exponents, ``rngs`` n generators.
    """
    if config.M < 1:
        raise ValueError("M must be >= 1")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    n, d = x0s.shape
    if not (len(rngs) == len(ab_pairs) == n):
        raise ValueError("one rng and one (a, b) pair per item required")
    sched = respace(base_sched, T)
    M, K_q, U = config.M, config.K_q, config.U
    noise = np.stack([_draw_noise(rng, M, T, K_q, U, d) for rng in rngs])  # (n, M, T, S, d)
    curves = [GuidanceCurveParams(a, b, config.g_min, config.g_max, max(M, 2)) for a, b in ab_pairs]
    g_table = np.array([[guidance_curve(m, cv) for m in range(1, M + 1)] for cv in curves])  # (n, M)
    c = np.asarray(conds_c, dtype=float)
    r = np.asarray(conds_r, dtype=float)
    queue = np.repeat(x0s[:, None, :], K_q, axis=1)  # clean slots
    latents = np.empty((n, M, d))
    clamps = np.zeros(n, dtype=int)
    for m in range(M):
        g = g_table[:, m:m + 1]
        pos = frame_position(m, M)
        z = None
        for s, t in enumerate(range(T, 0, -1)):
            nz = noise[:, m, s]
            ctx = forward_noise(queue, t, nz[:, :K_q], sched)
            if z is None:
                z = ctx[:, -1].copy()  # proximity start: the last inverted slot
            eps_hat = _guided(theta, z, t, sched, c, r, g, ctx, pos)
            if config.clip_x0:
                eps_hat = clip_predicted_noise(z, t, eps_hat, sched)
            z = _reverse_with(z, t, eps_hat, sched, nz[:, K_q])
            for u in range(U):
                beta = sched.beta(t)
                z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * nz[:, K_q + 1 + 2 * u]
                eps_hat = _guided(theta, z, t, sched, c, r, g, ctx, pos)
                if config.clip_x0:
                    eps_hat = clip_predicted_noise(z, t, eps_hat, sched)
                z = _reverse_with(z, t, eps_hat, sched, nz[:, K_q + 2 + 2 * u])
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite latent at frame {m + 1}")
        aus = z[:, N_IDENTITY:]
        clamps += np.count_nonzero((aus < -CLAMP_TOL) | (aus > AU_MAX_RENDER + CLAMP_TOL), axis=1)
        z, _ = clamp_latent(z)
        latents[:, m] = z
        queue = np.concatenate([queue[:, 1:], z[:, None]], axis=1)
    clips = []
    for i in range(n):
        frames = None
        if config.render:
            frames = np.stack([render_latent(zz, config.H, config.W) for zz in latents[i]])
        clips.append(VideoClip(latents[i], frames, {"T": T, "a": ab_pairs[i][0], "b": ab_pairs[i][1]},
                               int(clamps[i])))
    return clips


def _reverse_with(z, t, eps_hat, sched, xi):
    mu = reverse_mean(z, t, eps_hat, sched)
    return mu if t == 1 else mu + np.sqrt(sched.beta(t)) * xi


def build_training_set(clips, conditions, references, K_q: int = K_QUEUE):
    """Frame-level targets with their preceding K_q clean frames, padded with the reference.

    ``conditions[i]`` is the text embedding of clip i and ``references[i]`` its
    identity reference latent.
    """
    from .diffusion import DenoiserTrainingSet

    z0, ctx0, cs, rs, pos = [], [], [], [], []
    for clip, c, r in zip(clips, conditions, references):
        lat = np.asarray(clip.latents, dtype=float)
        padded = np.concatenate([np.tile(r, (K_q, 1)), lat], axis=0)
        for m in range(len(lat)):
            pos.append(frame_position(m, len(lat)))
            z0.append(lat[m])
            ctx0.append(padded[m:m + K_q])
            cs.append(c)
            rs.append(r)
    if not z0:
        raise ValueError("no frames to train on")
    return DenoiserTrainingSet(np.array(z0), np.array(ctx0), np.array(cs), np.array(rs), np.array(pos))
