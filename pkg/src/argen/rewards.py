"""Reward components for a generated clip, SSIM, and the audited composite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .face import face_probability, laplacian_variance
from .labels import K_AU, N_IDENTITY

TAU_SHARP = 5e-4
TAU_CONTRAST = 0.15
QUALITY_ALPHA = 0.6
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def reward_steps(T: int, step_set) -> float:
    step_set = sorted(step_set)
    if T not in step_set:
        raise ValueError(f"T={T} not in {step_set}")
    return 1.0 - T / max(step_set)


def _windows(img, win, stride):
    H, W = img.shape
    ys = range(0, H - win + 1, stride)
    xs = range(0, W - win + 1, stride)
    return np.stack([img[y:y + win, x:x + win] for y in ys for x in xs])


def ssim(a, b, win: int = 8, stride: int = 4) -> float:
    """Mean SSIM over ``win`` x ``win`` windows placed every ``stride`` pixels (dynamic range 1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        win = stride = min(a.shape)
    wa, wb = _windows(a, win, stride), _windows(b, win, stride)
    mu_a, mu_b = wa.mean(axis=(1, 2)), wb.mean(axis=(1, 2))
    va = wa.var(axis=(1, 2))
    vb = wb.var(axis=(1, 2))
    cov = ((wa - mu_a[:, None, None]) * (wb - mu_b[:, None, None])).mean(axis=(1, 2))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (va + vb + SSIM_C2)
    return float(np.mean(num / den))


def frame_quality(img, tau_sharp=TAU_SHARP, tau_contrast=TAU_CONTRAST) -> float:
    img = np.asarray(img, dtype=float)
    return 0.5 * (min(1.0, laplacian_variance(img) / tau_sharp) + min(1.0, float(img.std()) / tau_contrast))


def reward_quality(frames, alpha: float = QUALITY_ALPHA, tau_sharp=TAU_SHARP, tau_contrast=TAU_CONTRAST) -> float:
    """alpha * per-frame sharpness/contrast + (1 - alpha) * consecutive-frame SSIM."""
    if len(frames) < 2:
        raise ValueError("quality reward needs at least 2 frames")
    q_frames = float(np.mean([frame_quality(f, tau_sharp, tau_contrast) for f in frames]))
    q_video = float(np.mean([ssim(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]))
    q_video = min(1.0, max(0.0, q_video))
    return alpha * q_frames + (1.0 - alpha) * q_video


def reward_face(frames) -> float:
    if len(frames) < 1:
        raise ValueError("empty clip")
    return float(np.mean([face_probability(f) for f in frames]))


def reward_expression(au_frames, a_max: float) -> float:
    """Mean over frames of max(0, 1 - ||a_m|| / a_max)."""
    if not a_max > 0:
        raise ValueError("a_max must be positive")
    norms = np.linalg.norm(np.atleast_2d(np.asarray(au_frames, dtype=float)), axis=1)
    return float(np.mean(np.maximum(0.0, 1.0 - norms / a_max)))


def amplitude_ceiling(au_frames=None, q: float = 95.0) -> float:
    """Upper percentile of per-frame AU norms; sqrt(K_au) when there is no data."""
    if au_frames is None or len(au_frames) == 0:
        return math.sqrt(K_AU)
    value = float(np.percentile(np.linalg.norm(np.asarray(au_frames, dtype=float), axis=1), q))
    return value if value > 0 else math.sqrt(K_AU)


@dataclass(frozen=True)
class RewardParts:
    r_s: float
    r_q: float
    r_f: float
    r_e: float


@dataclass
class RewardBreakdown:
    parts: RewardParts
    composite: float
    raw: float
    audited: bool = True
    penalized: bool = False

    @property
    def r_s(self):
        return self.parts.r_s

    @property
    def r_q(self):
        return self.parts.r_q

    @property
    def r_f(self):
        return self.parts.r_f

    @property
    def r_e(self):
        return self.parts.r_e


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 3.0
    gamma: float = 1.0
    k: int = 1
    # ablation switches; the step reward always participates
    use_quality: bool = True
    use_face_expression: bool = True
    step_set: tuple = (5, 10, 15, 20)

    def composite(self, p: RewardParts) -> float:
        extra = (p.r_q if self.use_quality else 0.0) + ((p.r_f + p.r_e) if self.use_face_expression else 0.0)
        return p.r_s + self.lam * extra


def score_clip(latents, frames, T: int, a_max: float, step_set=(5, 10, 15, 20)) -> RewardParts:
    lat = np.asarray(latents, dtype=float)
    return RewardParts(
        r_s=reward_steps(T, step_set),
        r_q=reward_quality(frames),
        r_f=reward_face(frames),
        r_e=reward_expression(lat[:, N_IDENTITY:], a_max),
    )


def composite_with_audit(pool, config: RewardConfig = RewardConfig(), lam=None, gamma=None, k=None):
    """Composite reward per pool entry; entries outside the pool's top k receive -gamma.

    ``pool`` holds RewardParts or ``(action, RewardParts)`` pairs. Ties rank by lower index.
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    lam = config.lam if lam is None else lam
    gamma = config.gamma if gamma is None else gamma
    k = config.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    parts = [p[1] if isinstance(p, tuple) else p for p in pool]
    cfg = RewardConfig(lam, gamma, k, config.use_quality, config.use_face_expression, config.step_set)
    raw = np.array([cfg.composite(p) for p in parts])
    order = sorted(range(len(raw)), key=lambda i: (-raw[i], i))
    keep = set(order[:k])
    return [RewardBreakdown(p, float(raw[i]) if i in keep else -float(gamma), float(raw[i]), True, i not in keep)
            for i, p in enumerate(parts)]


def audit_composites(raw, k: int, gamma: float):
    """Vectorised audit over pools stacked as rows of ``raw`` (n_pools, pool_size)."""
    raw = np.asarray(raw, dtype=float)
    out = np.full_like(raw, -gamma)
    # stable argsort on the negated values ranks ties by lower index
    order = np.argsort(-raw, axis=1, kind="stable")[:, :k]
    rows = np.arange(raw.shape[0])[:, None]
    out[rows, order] = raw[rows, order]
    return out
