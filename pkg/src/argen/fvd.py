"""Frechet distances between Gaussian fits of clip features, overall and per group."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_DIM = 64
HIDDEN_DIM = 128
CLIP_FRAMES = 16
POOL = 4
POOLED = 16
PROJ_SEED = 7_301
RIDGE = 1e-6
INPUT_GAIN = 3.0


@lru_cache(maxsize=1)
def _projections():
    rng = np.random.default_rng(PROJ_SEED)
    d_in = CLIP_FRAMES * POOLED * POOLED
    w1 = rng.standard_normal((d_in, HIDDEN_DIM)) * (INPUT_GAIN / np.sqrt(d_in))
    w2 = rng.standard_normal((HIDDEN_DIM, FEATURE_DIM)) / np.sqrt(HIDDEN_DIM)
    return w1, w2


def feature_bound() -> float:
    """Upper bound on |feature| entries: tanh outputs are in [-1, 1]."""
    _, w2 = _projections()
    return float(np.abs(w2).sum(axis=0).max())


def resample_frames(frames, M: int = CLIP_FRAMES):
    frames = np.asarray(frames, dtype=float)
    if len(frames) == 0:
        raise ValueError("empty clip")
    idx = np.round(np.linspace(0, len(frames) - 1, M)).astype(int)
    return frames[idx]


def _pool_frames(frames):
    n, H, W = frames.shape
    if H % POOLED or W % POOLED:
        raise ValueError(f"frame size {H}x{W} not divisible into {POOLED}x{POOLED} cells")
    fy, fx = H // POOLED, W // POOLED
    return frames.reshape(n, POOLED, fy, POOLED, fx).mean(axis=(2, 4))


def featurize_clip(frames) -> np.ndarray:
    """Fixed random two-layer map of the pooled, time-resampled clip volume."""
    vol = _pool_frames(resample_frames(frames)).reshape(-1) - 0.5
    w1, w2 = _projections()
    return np.tanh(vol @ w1) @ w2


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features, ridge: float = RIDGE) -> GaussianStats:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples for a covariance")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T) + ridge * np.eye(x.shape[1])
    return GaussianStats(mu, sigma, x.shape[0])


def sqrtm_psd(A, sym_tol: float = 1e-8, neg_tol: float = 1e-8) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("square matrix required")
    scale = max(1.0, float(np.abs(A).max()))
    if np.abs(A - A.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (A + A.T))
    if w.min() < -neg_tol * scale:
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3g}")
    root = np.sqrt(np.clip(w, 0.0, None))
    S = (v * root) @ v.T
    return 0.5 * (S + S.T)


def frechet_distance(g: GaussianStats, t: GaussianStats) -> float:
    if g.mu.shape != t.mu.shape or g.sigma.shape != t.sigma.shape:
        raise ValueError("dimension mismatch")
    diff = g.mu - t.mu
    root_g = sqrtm_psd(g.sigma)
    inner = root_g @ t.sigma @ root_g
    cross = sqrtm_psd(0.5 * (inner + inner.T), sym_tol=1e-6, neg_tol=1e-6)
    d = float(diff @ diff + np.trace(g.sigma) + np.trace(t.sigma) - 2.0 * np.trace(cross))
    if d < 0.0:
        if d < -1e-6:
            logger.warning("Frechet distance %.3g below tolerance", d)
        d = 0.0
    return d


def fvd(real_features, gen_features) -> float:
    return frechet_distance(gaussian_stats(gen_features), gaussian_stats(real_features))


@dataclass
class GroupedResult:
    mean: float
    std: float
    per_group: dict
    skipped: list


def grouped_fvd(real, gen) -> GroupedResult:
    """Per-group distances between ``{key: features}`` maps; unweighted mean and population std."""
    per_group, skipped = {}, []
    for key in sorted(set(real) | set(gen), key=str):
        r, g = real.get(key), gen.get(key)
        if r is None or g is None or len(r) < 2 or len(g) < 2:
            skipped.append(key)
            continue
        per_group[key] = fvd(r, g)
    if skipped:
        logger.warning("skipped %d undersized groups: %s", len(skipped), skipped)
    if not per_group:
        raise ValueError("no group has at least 2 clips on both sides")
    vals = np.array([per_group[k] for k in per_group])
    return GroupedResult(float(vals.mean()), float(vals.std()), per_group, skipped)


def group_features(features, keys):
    out: dict = {}
    for f, k in zip(features, keys):
        out.setdefault(k, []).append(f)
    return {k: np.array(v) for k, v in out.items()}
