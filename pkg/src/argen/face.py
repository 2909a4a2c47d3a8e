"""Parametric face renderer, analytic AU read-out, quality gates and the synthetic dataset.

Geometry lives in a canonical 64x64 frame (pixel centres at ``j + 0.5``);
other resolutions are mapped onto it. Every feature is drawn with a one-pixel
linear coverage ramp so that masses and centroids measured on the image are
close to linear in the parameters, which is what the read-out inverts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .labels import AU_IDS, EMOTIONS, K_AU, LATENT_DIM, N_IDENTITY, NON_SCARCE, SCARCE

logger = logging.getLogger(__name__)

CANON = 64.0
BG, FACE = 0.1, 0.8
EYE_DEPTH, BROW_DEPTH, NOSE_DEPTH, MOUTH_DEPTH = 0.6, 0.5, 0.4, 0.6
EYE_RX, BROW_HALF = 3.2, 1.0
NOSE_RX, NOSE_RY = 2.8, 2.2
AU_MAX_RENDER = 1.5

# quality gates
TAU_BLUR = 1e-4
BRIGHTNESS_RANGE = (0.15, 0.85)
TAU_CONTRAST = 0.05
TAU_DIM = 32

_A = {au: i for i, au in enumerate(AU_IDS)}


@dataclass(frozen=True)
class FaceParams:
    identity: tuple
    aus: tuple

    @classmethod
    def from_latent(cls, z):
        z = np.asarray(z, dtype=float)
        return cls(tuple(z[:N_IDENTITY]), tuple(z[N_IDENTITY:LATENT_DIM]))

    def latent(self):
        return np.concatenate([self.identity, self.aus]).astype(float)


# --------------------------------------------------------------------------
# geometry


def _geometry(identity, aus):
    w, eyes, brow, mouth = identity
    a = {au: aus[i] for au, i in _A.items()}
    y_e = 28.0 + 3.0 * brow
    s_e = 9.5 + 2.0 * eyes
    return {
        "face_rx": 22.0 + 4.0 * w, "face_ry": 29.0, "face_c": (32.0, 32.0),
        "y_e": y_e, "s_e": s_e,
        "eye_ry": 0.8 + 2.4 * a[5],
        "brow_xi": 4.5 - 2.0 * a[4], "brow_xo": s_e + 2.5,
        "brow_yi": y_e - 9.0 - 2.5 * a[1] + 2.0 * a[4],
        "brow_yo": y_e - 9.0 - 2.5 * a[2] + 1.0 * a[4],
        "nose_y": y_e + 7.5, "nose_depth": NOSE_DEPTH * a[9],
        "mouth_y": 46.0 + 3.0 * mouth, "mouth_w": 7.0 + 3.0 * a[20],
        "mouth_drop": 3.0 * a[15], "mouth_h0": 1.2 + 5.0 * a[26],
    }


def _ellipse_cov(X, Y, cx, cy, rx, ry):
    dx, dy = (X - cx) / rx, (Y - cy) / ry
    rho = np.sqrt(dx * dx + dy * dy)
    grad = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2) / np.maximum(rho, 1e-9)
    sd = np.where(rho > 1e-6, (rho - 1.0) / np.maximum(grad, 1e-9), -min(rx, ry))
    return np.clip(0.5 - sd, 0.0, 1.0)


def _capsule_cov(X, Y, p0, p1, half):
    (x0, y0), (x1, y1) = p0, p1
    vx, vy = x1 - x0, y1 - y0
    t = np.clip(((X - x0) * vx + (Y - y0) * vy) / max(vx * vx + vy * vy, 1e-12), 0.0, 1.0)
    d = np.hypot(X - (x0 + t * vx), Y - (y0 + t * vy))
    return np.clip(half + 0.5 - d, 0.0, 1.0)


def _mouth_cov(X, Y, g):
    xo = np.abs(X - 32.0)
    u = np.clip(xo / g["mouth_w"], 0.0, 1.0)
    top = g["mouth_y"] + g["mouth_drop"] * u * u
    h = 1.2 + (g["mouth_h0"] - 1.2) * (1.0 - u * u)
    cy = np.clip(Y - top + 0.5, 0.0, 1.0) * np.clip(top + h - Y + 0.5, 0.0, 1.0)
    return cy * np.clip(g["mouth_w"] + 0.5 - xo, 0.0, 1.0)


@lru_cache(maxsize=8)
def _grid(H, W):
    ys = (np.arange(H) + 0.5) * CANON / H
    xs = (np.arange(W) + 0.5) * CANON / W
    return np.meshgrid(xs, ys)


def _clamped(p: FaceParams):
    ident = np.clip(np.asarray(p.identity, dtype=float), -1.0, 1.0)
    aus = np.clip(np.asarray(p.aus, dtype=float), 0.0, AU_MAX_RENDER)
    return ident, aus


def render(p: FaceParams, H: int = 64, W: int = 64) -> np.ndarray:
    """Deterministic grayscale face in [0, 1]."""
    if H < 32 or W < 32:
        raise ValueError("render needs H, W >= 32")
    X, Y = _grid(H, W)
    g = _geometry(*_clamped(p))
    face = _ellipse_cov(X, Y, *g["face_c"], g["face_rx"], g["face_ry"])
    dark = np.zeros_like(X)
    for sgn in (-1.0, 1.0):
        dark += EYE_DEPTH * _ellipse_cov(X, Y, 32.0 + sgn * g["s_e"], g["y_e"], EYE_RX, g["eye_ry"])
        dark += BROW_DEPTH * _capsule_cov(X, Y, (32.0 + sgn * g["brow_xi"], g["brow_yi"]),
                                          (32.0 + sgn * g["brow_xo"], g["brow_yo"]), BROW_HALF)
    if g["nose_depth"] > 0:
        dark += g["nose_depth"] * _ellipse_cov(X, Y, 32.0, g["nose_y"], NOSE_RX, NOSE_RY)
    dark += MOUTH_DEPTH * _mouth_cov(X, Y, g)
    img = BG + (FACE - BG) * face - face * dark
    return np.clip(img, 0.0, 1.0)


def render_latent(z, H=64, W=64):
    return render(FaceParams.from_latent(z), H, W)


# --------------------------------------------------------------------------
# analysis


@dataclass
class FrameAnalysis:
    blur: float
    brightness: float
    contrast: float
    min_dim: int
    aus: np.ndarray = field(repr=False)
    face_prob: float

    def passes_gates(self) -> bool:
        return (self.blur >= TAU_BLUR
                and BRIGHTNESS_RANGE[0] <= self.brightness <= BRIGHTNESS_RANGE[1]
                and self.contrast >= TAU_CONTRAST
                and self.min_dim >= TAU_DIM)


def laplacian_variance(img) -> float:
    img = np.asarray(img, dtype=float)
    lap = img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:] - 4.0 * img[1:-1, 1:-1]
    return float(lap.var())


@lru_cache(maxsize=64)
def _ellipse_mass_table(rx):
    """Coverage mass of an ellipse vs its vertical radius, on the canonical grid."""
    X, Y = np.meshgrid(np.arange(0, 24) + 0.5, np.arange(0, 24) + 0.5)
    radii = np.linspace(0.3, 6.0, 115)
    masses = np.array([_ellipse_cov(X, Y, 12.0, 12.0, rx, ry).sum() for ry in radii])
    return masses, radii


def _radius_from_mass(mass, rx):
    masses, radii = _ellipse_mass_table(rx)
    return float(np.interp(mass, masses, radii))


@lru_cache(maxsize=8)
def _template(H, W):
    t = render(FaceParams((0.0,) * N_IDENTITY, (0.0,) * K_AU), H, W)
    t = t - t.mean()
    return t / np.linalg.norm(t)


def face_probability(img) -> float:
    img = np.asarray(img, dtype=float)
    x = img - img.mean()
    n = np.linalg.norm(x)
    corr = 0.0 if n < 1e-12 else float(np.sum(x * _template(*img.shape)) / n)
    return float(1.0 / (1.0 + np.exp(-12.0 * (corr - 0.5))))


def _weighted_centroid(X, Y, D):
    m = D.sum()
    if m <= 1e-9:
        return None
    return float((X * D).sum() / m), float((Y * D).sum() / m), float(m)


def extract_aus(img) -> np.ndarray:
    """Invert the renderer's geometry from region statistics; returns 8 AU intensities."""
    img = np.asarray(img, dtype=float)
    H, W = img.shape
    X, Y = _grid(H, W)
    px_area = (CANON / H) * (CANON / W)
    aus = np.zeros(K_AU)

    # face width from one clean row between nose and mouth
    row = int(41.5 * H / CANON)
    chord = np.clip((img[row] - BG) / (FACE - BG), 0.0, 1.0).sum() * CANON / W
    dy = (row + 0.5) * CANON / H - 32.0
    rx = np.clip(chord / (2.0 * np.sqrt(1.0 - (dy / 29.0) ** 2)), 15.0, 30.0)
    face = _ellipse_cov(X, Y, 32.0, 32.0, rx, 29.0)
    D = np.where(face > 0.999, FACE - img, 0.0)
    D = np.clip(D, 0.0, None)
    xo = np.abs(X - 32.0)

    # eyes: lowest dark blob in the eye columns, brows are the blob above it
    col = (xo >= 4.0) & (xo <= 15.0)
    band = (Y >= 8.0) & (Y <= 38.0)
    prof = np.where(col & band, D, 0.0).sum(axis=1)
    rows = np.nonzero(prof > 0.05)[0]
    if len(rows) == 0:
        return aus
    bottom = rows[-1]
    top = bottom
    while top > 0 and prof[top - 1] > 0.05:
        top -= 1
    eye_rows = np.zeros(H, bool)
    eye_rows[top:bottom + 1] = True
    eye_mask = col & eye_rows[:, None]
    ec = _weighted_centroid(xo, Y, np.where(eye_mask, D, 0.0))
    if ec is None:
        return aus
    s_e, y_e, eye_mass = ec
    eye_ry = _radius_from_mass(eye_mass * px_area / (2.0 * EYE_DEPTH), EYE_RX)
    aus[_A[5]] = (eye_ry - 0.8) / 2.4

    # brows: centroid + principal axis per side, outer end anchored at s_e + 2.5
    brow_rows = (Y < (top + 0.5) * CANON / H - 0.5) & (Y > y_e - 17.0)
    x_o = s_e + 2.5
    ends = []
    for sgn in (-1.0, 1.0):
        side = ((X - 32.0) * sgn > 0.3) & (xo <= 16.5) & brow_rows
        Dm = np.where(side, D, 0.0)
        c = _weighted_centroid(xo, Y, Dm)
        if c is None:
            continue
        cx, cy, _ = c
        m = Dm.sum()
        sxx = (Dm * (xo - cx) ** 2).sum() / m
        sxy = (Dm * (xo - cx) * (Y - cy)).sum() / m
        syy = (Dm * (Y - cy) ** 2).sum() / m
        theta = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
        slope = np.tan(theta)
        x_i = 2.0 * cx - x_o
        ends.append((x_i, cy + slope * (x_i - cx), cy + slope * (x_o - cx)))
    if ends:
        x_i, y_i, y_o = np.mean(ends, axis=0)
        au4 = (4.5 - x_i) / 2.0
        aus[_A[4]] = au4
        aus[_A[1]] = (y_e - 9.0 + 2.0 * au4 - y_i) / 2.5
        aus[_A[2]] = (y_e - 9.0 + 1.0 * au4 - y_o) / 2.5

    # nose wrinkle shading
    nose = (xo <= 4.5) & (Y >= y_e + 4.3) & (Y <= y_e + 10.7)
    unit_nose = _ellipse_mass_table_nose()
    aus[_A[9]] = (np.where(nose, D, 0.0).sum() * px_area) / (NOSE_DEPTH * unit_nose)

    # mouth: column masses give opening and width, column centroids give corner drop
    mouth = (Y >= y_e + 11.0) & (Y <= 58.0) & (xo <= 13.5)
    Dm = np.where(mouth, D, 0.0) / MOUTH_DEPTH
    colmass = Dm.sum(axis=0) * CANON / H
    total = colmass.sum() * CANON / W
    if total > 1e-6:
        xs = (np.arange(W) + 0.5) * CANON / W - 32.0
        centre = np.argsort(np.abs(xs))[:2]
        h_c = colmass[centre].mean()
        au26 = (h_c - 1.2) / 5.0
        w_m = total / (2.4 + (20.0 / 3.0) * au26)
        for _ in range(3):
            u0 = np.abs(xs[centre]).mean() / w_m
            au26 = (h_c - 1.2) / (5.0 * (1.0 - u0 * u0))
            w_m = total / (2.4 + (20.0 / 3.0) * au26)
        aus[_A[26]] = au26
        aus[_A[20]] = (w_m - 7.0) / 3.0
        with np.errstate(invalid="ignore", divide="ignore"):
            cyc = (Dm * Y).sum(axis=0) / np.maximum(Dm.sum(axis=0), 1e-12)
        y_m = cyc[centre].mean() - h_c / 2.0
        u = np.abs(xs) / w_m
        sel = (u >= 0.45) & (u <= 0.8) & (colmass > 0.5)
        if sel.any():
            h_u = 1.2 + 5.0 * au26 * (1.0 - u[sel] ** 2)
            drop = (cyc[sel] - h_u / 2.0 - y_m) / (u[sel] ** 2)
            aus[_A[15]] = float(np.mean(drop)) / 3.0
    aus = np.nan_to_num(aus, nan=0.0, posinf=AU_MAX_RENDER, neginf=0.0)
    return np.clip(aus, 0.0, AU_MAX_RENDER)


@lru_cache(maxsize=1)
def _ellipse_mass_table_nose():
    X, Y = np.meshgrid(np.arange(0, 16) + 0.5, np.arange(0, 16) + 0.5)
    return float(_ellipse_cov(X, Y, 8.0, 8.0, NOSE_RX, NOSE_RY).sum())


def analyze_frame(img) -> FrameAnalysis:
    img = np.asarray(img, dtype=float)
    return FrameAnalysis(
        blur=laplacian_variance(img),
        brightness=float(img.mean()),
        contrast=float(img.std()),
        min_dim=int(min(img.shape)),
        aus=extract_aus(img),
        face_prob=face_probability(img),
    )


NO_VALID_FRAME = None


def select_identity_frame(frames, analyses=None):
    """Index of the least-activated frame that passes every quality gate, or None."""
    if len(frames) == 0:
        raise ValueError("clip has no frames")
    analyses = analyses or [analyze_frame(f) for f in frames]
    best, best_score = NO_VALID_FRAME, np.inf
    for i, fa in enumerate(analyses):
        if not fa.passes_gates():
            continue
        score = float(np.mean(fa.aus))
        if score < best_score:
            best, best_score = i, score
    return best


# --------------------------------------------------------------------------
# dataset


def class_patterns(kb=None) -> dict:
    """Peak AU vector per emotion; scarce classes come from the knowledge base prototypes."""
    from .kb import prototype_pattern

    table = {
        # each dense class shares AUs with a scarce neighbour, so the long tail is confusable
        "HA": {2: 0.3, 5: 0.4, 20: 0.6, 26: 0.7},
        "SA": {1: 0.7, 4: 0.55, 5: 0.4, 15: 0.6, 20: 0.3},
        "NE": {},
        "AN": {4: 0.75, 9: 0.75, 15: 0.55},
    }
    for emo in SCARCE:
        table[emo] = prototype_pattern(emo, kb)
    out = {}
    for emo, pat in table.items():
        v = np.zeros(K_AU)
        for au, val in pat.items():
            v[_A[au]] = val
        out[emo] = v
    return out


@dataclass
class ClipRecord:
    clip_id: str
    label: str
    identity_id: int
    split: str
    latents: np.ndarray = field(repr=False)  # (M, 12) generating parameters per frame
    frames: np.ndarray | None = field(default=None, repr=False)  # (M, H, W)
    peak: float = 0.0


@dataclass
class EmotionDataset:
    clips: list
    identities: np.ndarray  # (n_identities, 4)

    def split(self, name):
        return EmotionDataset([c for c in self.clips if c.split == name], self.identities)

    def labels(self):
        return [c.label for c in self.clips]

    def __len__(self):
        return len(self.clips)


@dataclass
class DomainConfig:
    n_identities: int = 24
    train_counts: dict = field(default_factory=lambda: {**{e: 40 for e in NON_SCARCE}, **{e: 6 for e in SCARCE}})
    test_counts: dict = field(default_factory=lambda: {e: 10 for e in EMOTIONS})
    M: int = 16
    H: int = 64
    W: int = 64
    jitter: float = 0.03
    peak_range: tuple = (0.5, 1.0)


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def synthesize_clip_latents(identity, pattern, peak, M, jitter, rng):
    ramp = smoothstep(np.arange(M) / max(M - 1, 1))
    aus = ramp[:, None] * peak * pattern[None, :] + jitter * rng.standard_normal((M, K_AU))
    aus = np.clip(aus, 0.0, 1.0)
    return np.concatenate([np.tile(identity, (M, 1)), aus], axis=1)


def synthesize_dataset(config: DomainConfig, rng, render_frames: bool = True) -> EmotionDataset:
    if config.n_identities < 1 or config.M < 2:
        raise ValueError("need >= 1 identity and M >= 2")
    for split_counts in (config.train_counts, config.test_counts):
        for label, n in split_counts.items():
            if label not in EMOTIONS or int(n) < 0 or int(n) != n:
                raise ValueError(f"invalid clip count {label}={n}")
    patterns = class_patterns()
    identities = rng.uniform(-1.0, 1.0, size=(config.n_identities, N_IDENTITY))
    clips = []
    for split, counts in (("train", config.train_counts), ("test", config.test_counts)):
        for label in EMOTIONS:
            for j in range(int(counts.get(label, 0))):
                # round-robin keeps every identity represented in the larger classes
                ident = (j + EMOTIONS.index(label)) % config.n_identities
                peak = float(rng.uniform(*config.peak_range))
                lat = synthesize_clip_latents(identities[ident], patterns[label], peak, config.M,
                                              config.jitter, rng)
                clip = ClipRecord(f"{split}-{label}-{j:03d}", label, int(ident), split, lat, peak=peak)
                if render_frames:
                    clip.frames = np.stack([render_latent(z, config.H, config.W) for z in lat])
                clips.append(clip)
    return EmotionDataset(clips, identities)


@dataclass
class IdentityReference:
    identity_id: int
    clip_id: str
    frame_index: int
    latent: np.ndarray
    frame: np.ndarray = field(repr=False)


def partition_dataset(d1: EmotionDataset, scarce=SCARCE):
    """Split into non-scarce, scarce, neutral subsets and one reference frame per identity."""
    d_ns = EmotionDataset([c for c in d1.clips if c.label not in scarce], d1.identities)
    d_s = EmotionDataset([c for c in d1.clips if c.label in scarce], d1.identities)
    d_ne = EmotionDataset([c for c in d_ns.clips if c.label == "NE"], d1.identities)
    if not d_ne.clips:
        raise ValueError("no neutral clips to draw identity frames from")
    best: dict[int, tuple] = {}
    rejected = []
    for clip in d_ne.clips:
        analyses = [analyze_frame(f) for f in clip.frames]
        idx = select_identity_frame(clip.frames, analyses)
        if idx is None:
            rejected.append(clip.clip_id)
            continue
        score = float(np.mean(analyses[idx].aus))
        if clip.identity_id not in best or score < best[clip.identity_id][0]:
            best[clip.identity_id] = (score, clip, idx)
    if rejected:
        logger.warning("%d neutral clips had no valid frame: %s", len(rejected), rejected[:5])
    x_v = [IdentityReference(ident, clip.clip_id, idx, clip.latents[idx].copy(), clip.frames[idx])
           for ident, (_, clip, idx) in sorted(best.items())]
    return d_ns, d_s, d_ne, x_v
