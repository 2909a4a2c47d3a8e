"""AU-feature emotion classifier, WAR/UAR metrics and the augmentation experiment."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .face import extract_aus
from .labels import EMOTIONS, K_AU, SCARCE

logger = logging.getLogger(__name__)

FEATURE_DIM = 3 * K_AU


def clip_au_track(clip) -> np.ndarray:
    """(M, 8) AUs read back from the rendered frames."""
    if clip.frames is None:
        raise ValueError(f"clip {getattr(clip, 'clip_id', '?')} has no rendered frames")
    return np.array([extract_aus(f) for f in clip.frames])


def features_from_track(track) -> np.ndarray:
    track = np.asarray(track, dtype=float)
    if track.ndim != 2 or len(track) < 2:
        raise ValueError("need at least 2 frames")
    return np.concatenate([track.mean(axis=0), track.max(axis=0), np.abs(np.diff(track, axis=0)).mean(axis=0)])


def clip_features(clip) -> np.ndarray:
    """Per-AU mean, max and mean absolute frame-to-frame change (24 values)."""
    return features_from_track(clip_au_track(clip))


def dataset_features(dataset):
    X = np.array([clip_features(c) for c in dataset.clips]).reshape(-1, FEATURE_DIM)
    y = np.array([EMOTIONS.index(c.label) for c in dataset.clips], dtype=int)
    return X, y


@dataclass
class ClassifierConfig:
    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4


@dataclass
class Classifier:
    W: np.ndarray  # (24, 7)
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    losses: list = field(default_factory=list)

    def logits(self, X):
        return ((np.asarray(X, dtype=float) - self.mean) / self.scale) @ self.W + self.b

    def predict_proba(self, X):
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)


def fit_softmax(X, y, config: ClassifierConfig = ClassifierConfig(), n_classes: int = len(EMOTIONS)) -> Classifier:
    """Full-batch gradient descent on standardised features; weights start at zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 classes to train a classifier")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    clf = Classifier(np.zeros((X.shape[1], n_classes)), np.zeros(n_classes), mean, scale)
    Xs = (X - mean) / scale
    Y = np.eye(n_classes)[y]
    n = len(X)
    for _ in range(config.epochs):
        P = clf.predict_proba(X)
        loss = -np.mean(np.log(P[np.arange(n), y] + 1e-300)) + 0.5 * config.l2 * np.sum(clf.W ** 2)
        clf.losses.append(float(loss))
        G = (P - Y) / n
        clf.W -= config.lr * (Xs.T @ G + config.l2 * clf.W)
        clf.b -= config.lr * G.sum(axis=0)
    return clf


def train_classifier(train, config: ClassifierConfig = ClassifierConfig(), rng=None) -> Classifier:
    # rng is accepted for interface symmetry; zero init and full-batch descent are deterministic
    X, y = dataset_features(train)
    return fit_softmax(X, y, config)


@dataclass
class RecognitionMetrics:
    war: float
    uar: float
    per_class: dict  # label -> recall, or None when the label is absent from the test set

    def scarce_mean(self, scarce=SCARCE):
        vals = [self.per_class[e] for e in scarce if self.per_class.get(e) is not None]
        return float(np.mean(vals)) if vals else float("nan")


def metrics_from_predictions(y_true, y_pred, labels=EMOTIONS) -> RecognitionMetrics:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if len(y_true) == 0:
        raise ValueError("empty test set")
    per_class = {}
    for k, name in enumerate(labels):
        mask = y_true == k
        per_class[name] = float(np.mean(y_pred[mask] == k)) if mask.any() else None
    present = [v for v in per_class.values() if v is not None]
    return RecognitionMetrics(float(np.mean(y_true == y_pred)), float(np.mean(present)), per_class)


def evaluate(clf: Classifier, test) -> RecognitionMetrics:
    if len(test) == 0:
        raise ValueError("empty test set")
    X, y = dataset_features(test)
    return metrics_from_predictions(y, clf.predict(X))


def dataset_hash(dataset) -> str:
    h = hashlib.sha256()
    for c in dataset.clips:
        h.update(f"{c.clip_id}|{c.label}|".encode())
        h.update(np.ascontiguousarray(c.frames if c.frames is not None else c.latents, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class ArmResult:
    arm: str
    seed: int
    metrics: RecognitionMetrics
    test_hash: str
    n_train: int


def _merge(train, extra):
    from .face import EmotionDataset

    return EmotionDataset(list(train.clips) + list(extra.clips), train.identities)


def augmentation_experiment(runs, config: ClassifierConfig = ClassifierConfig()):
    """``runs``: per seed ``(seed, train, test, {arm: D_3})``; the baseline arm is named ``original``.

    Returns (rows, summary): one ArmResult per (seed, arm) and per-seed deltas
    of each augmented arm against ``original``.
    """
    rows, summary = [], []
    for seed, train, test, augmented in runs:
        if len(train) == 0 or len(test) == 0:
            raise ValueError(f"seed {seed}: missing train or test split")
        test_hash = dataset_hash(test)
        Xte, yte = dataset_features(test)
        Xtr, ytr = dataset_features(train)
        base = metrics_from_predictions(yte, fit_softmax(Xtr, ytr, config).predict(Xte))
        rows.append(ArmResult("original", seed, base, test_hash, len(train)))
        for arm, d3 in augmented.items():
            merged = _merge(train, d3)
            Xa, ya = dataset_features(d3)
            Xm = np.concatenate([Xtr, Xa.reshape(-1, FEATURE_DIM)])
            ym = np.concatenate([ytr, ya])
            if dataset_hash(test) != test_hash:
                raise RuntimeError("test split changed during the experiment")
            m = metrics_from_predictions(yte, fit_softmax(Xm, ym, config).predict(Xte))
            rows.append(ArmResult(arm, seed, m, test_hash, len(merged)))
            summary.append({
                "seed": seed, "arm": arm,
                "delta_war": m.war - base.war, "delta_uar": m.uar - base.uar,
                "delta_scarce": m.scarce_mean() - base.scarce_mean(),
                "delta_per_class": {e: (None if m.per_class[e] is None else m.per_class[e] - base.per_class[e])
                                    for e in EMOTIONS},
            })
    return rows, summary
