"""Scarce-emotion AU knowledge base, retrieval, intensity-aware realisation and prompts."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .labels import AU_IDS, AU_PHRASES, EMOTION_NAMES, SCARCE

TEXT_DIM = 32
HASH_BUCKETS = 1024
EMBED_SEED = 20240917
_TAG = re.compile(r"\[AU(\d+)\]")


@dataclass(frozen=True)
class KBRecord:
    id: str
    emotion: str
    aus: tuple
    description: str
    intensities: dict

    def __post_init__(self):
        if self.emotion not in SCARCE:
            raise ValueError(f"knowledge base covers scarce emotions only, got {self.emotion}")
        for au in self.aus:
            if au not in AU_IDS:
                raise ValueError(f"AU{au} not in the domain inventory")
            if self.description.count(f"[AU{au}]") != 1:
                raise ValueError(f"record {self.id}: description needs exactly one [AU{au}] tag")


_DEFAULT_RECORDS = [
    # full prototypes first; synthesize_dataset reads its class patterns from these
    ("su-full", "SU", {1: 0.85, 2: 0.85, 5: 0.75, 26: 0.9},
     "the brows lift with [AU1] and [AU2], the eyes open with [AU5], and the mouth falls open with a [AU26]"),
    ("su-brow-jaw", "SU", {1: 0.7, 2: 0.7, 26: 0.8},
     "[AU1] and [AU2] above a [AU26]"),
    ("su-eye-jaw", "SU", {5: 0.8, 26: 0.7},
     "[AU5] and a [AU26]"),
    ("su-upper", "SU", {1: 0.8, 2: 0.75, 5: 0.6},
     "[AU1] and [AU2] over [AU5]"),
    ("di-full", "DI", {4: 0.6, 9: 0.9, 15: 0.75},
     "a [AU9], [AU15] and [AU4]"),
    ("di-nose-lip", "DI", {9: 0.85, 15: 0.6},
     "a [AU9] with [AU15]"),
    ("di-nose-brow", "DI", {4: 0.55, 9: 0.8},
     "a [AU9] under [AU4]"),
    ("fe-full", "FE", {1: 0.75, 2: 0.55, 4: 0.55, 5: 0.85, 20: 0.8, 26: 0.5},
     "[AU1] and [AU2] pulled into [AU4], [AU5], [AU20] and a [AU26]"),
    ("fe-brow-lip", "FE", {1: 0.7, 2: 0.5, 4: 0.6, 20: 0.75},
     "[AU1], [AU2] and [AU4] above [AU20]"),
    ("fe-eye-lip", "FE", {4: 0.5, 5: 0.8, 20: 0.7},
     "[AU5] with [AU4] and [AU20]"),
    ("fe-lower", "FE", {5: 0.7, 20: 0.8, 26: 0.55},
     "[AU5], [AU20] and a [AU26]"),
]


def default_knowledge_base() -> list[KBRecord]:
    return [KBRecord(rid, emo, tuple(sorted(ints)), desc, dict(ints))
            for rid, emo, ints, desc in _DEFAULT_RECORDS]


def prototype_pattern(emotion: str, kb: Sequence[KBRecord] | None = None) -> dict:
    """AU intensities of the first (full-combination) record for ``emotion``."""
    for rec in kb or default_knowledge_base():
        if rec.emotion == emotion:
            return dict(rec.intensities)
    raise KeyError(emotion)


def retrieve_candidates(kb: Sequence[KBRecord], emotion: str, k: int, rng) -> list[KBRecord]:
    if emotion not in SCARCE:
        raise ValueError(f"no knowledge for non-scarce emotion {emotion!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = [rec for rec in kb if rec.emotion == emotion]
    if not pool:
        raise LookupError(f"knowledge base has no record for {emotion}")
    idx = rng.choice(len(pool), size=k, replace=k > len(pool))
    return [pool[i] for i in idx]


def adverb(intensity: float) -> str:
    if intensity < 0.33:
        return "slightly"
    if intensity < 0.66:
        return "moderately"
    return "strongly"


def realize_description(rec: KBRecord, r: dict | None = None) -> str:
    """Replace every ``[AUn]`` tag with an intensity adverb and the AU phrase."""
    r = rec.intensities if r is None else r

    def sub(match):
        au = int(match.group(1))
        if au not in r:
            raise KeyError(f"record {rec.id}: no intensity for AU{au}")
        value = float(r[au])
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"intensity {value} for AU{au} outside [0, 1]")
        return f"{adverb(value)} {AU_PHRASES[au]}"

    return _TAG.sub(sub, rec.description)


# --------------------------------------------------------------------------
# prompt composition


class ComposerError(RuntimeError):
    def __init__(self, message, identity_summary, emotion, clauses):
        super().__init__(message)
        self.identity_summary = identity_summary
        self.emotion = emotion
        self.clauses = list(clauses)


class PromptComposer(Protocol):
    def compose(self, identity_summary: str, emotion: str, clauses: Sequence[str]) -> str: ...


class TemplateComposer:
    """Offline stand-in for a vision-language composer."""

    template = "A person with {identity} gradually shows {emotion}: {clauses}, natural and subtle."

    def compose(self, identity_summary, emotion, clauses):
        return self.template.format(identity=identity_summary, emotion=EMOTION_NAMES[emotion],
                                    clauses="; ".join(clauses))


def identity_summary(identity) -> str:
    """Short wording of the four identity coordinates."""
    w, eyes, brow, mouth = (float(v) for v in identity[:4])

    def pick(v, lo, mid, hi):
        return lo if v < -0.33 else hi if v > 0.33 else mid

    return ", ".join([
        pick(w, "a narrow face", "a medium-width face", "a broad face"),
        pick(eyes, "close-set eyes", "evenly spaced eyes", "wide-set eyes"),
        pick(brow, "a high brow ridge", "a level brow ridge", "a low brow ridge"),
        pick(mouth, "a high mouth line", "a centred mouth line", "a low mouth line"),
    ])


@dataclass
class Prompt:
    text: str
    emotion: str
    identity_id: int
    record_ids: list
    c: np.ndarray = field(repr=False)

    def to_json(self):
        return {"text": self.text, "emotion": self.emotion, "identity_id": self.identity_id,
                "record_ids": list(self.record_ids), "c": [float(v) for v in self.c]}


def assemble_prompt(identity_id: int, identity, emotion: str, realized: Sequence[str],
                    composer: PromptComposer | None = None) -> Prompt:
    if not realized:
        raise ValueError("need at least one realised description")
    composer = composer or TemplateComposer()
    summary = identity_summary(identity)
    try:
        text = composer.compose(summary, emotion, list(realized))
    except ComposerError:
        raise
    except Exception as exc:
        raise ComposerError(f"composer failed: {exc}", summary, emotion, realized) from exc
    if not isinstance(text, str) or not text.strip():
        raise ComposerError("composer returned empty text", summary, emotion, realized)
    text = _TAG.sub("", text)
    return Prompt(text, emotion, identity_id, [], encode_text(text))


# --------------------------------------------------------------------------
# text encoder

_PROJECTION = None


def _projection():
    global _PROJECTION
    if _PROJECTION is None:
        _PROJECTION = np.random.default_rng(EMBED_SEED).standard_normal((HASH_BUCKETS, TEXT_DIM))
    return _PROJECTION


def encode_text(text: str) -> np.ndarray:
    """Hashed unigram+bigram counts through a fixed random projection, unit norm."""
    words = re.findall(r"[a-z0-9]+", text.lower())
    if not words:
        raise ValueError("cannot encode empty text")
    grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    counts = np.zeros(HASH_BUCKETS)
    for gram in grams:
        counts[zlib.crc32(gram.encode()) % HASH_BUCKETS] += 1.0
    v = counts @ _projection()
    return v / np.linalg.norm(v)


# --------------------------------------------------------------------------


def make_prompt(identity_id, identity, emotion, kb, k, rng, composer=None) -> Prompt:
    records = retrieve_candidates(kb, emotion, k, rng)
    prompt = assemble_prompt(identity_id, identity, emotion,
                             [realize_description(rec) for rec in records], composer)
    prompt.record_ids = [rec.id for rec in records]
    return prompt


def pattern_prompt(identity_id, identity, emotion, pattern: dict, composer=None) -> Prompt:
    """Prompt for a clip whose class has no knowledge-base entry, worded from its AU pattern."""
    active = [au for au in AU_IDS if pattern.get(au, 0.0) > 0.05]
    clauses = [f"{adverb(pattern[au])} {AU_PHRASES[au]}" for au in active] or ["relaxed, still features"]
    return assemble_prompt(identity_id, identity, emotion, [", ".join(clauses)], composer)


def build_prompt_set(identities, kb, rng, scarce=SCARCE, k: int = 2, composer=None):
    """One prompt per (identity, scarce emotion).

    ``identities`` is a sequence of ``(identity_id, latent)``. Returns
    ``(prompts, errors)``; failed items are reported, not raised.
    """
    if len(identities) == 0:
        raise ValueError("no identity references")
    prompts, errors = [], []
    for identity_id, latent in identities:
        for emotion in scarce:
            try:
                prompts.append(make_prompt(identity_id, latent, emotion, kb, k, rng, composer))
            except (ComposerError, LookupError, ValueError) as exc:
                errors.append({"identity_id": int(identity_id), "emotion": emotion, "error": str(exc)})
    return prompts, errors


def kb_to_json(kb):
    return {"embedding_seed": EMBED_SEED,
            "records": [{"id": r.id, "emotion": r.emotion, "aus": list(r.aus), "description": r.description,
                         "intensities": {str(k): v for k, v in r.intensities.items()}} for r in kb]}


def kb_from_json(obj):
    return [KBRecord(r["id"], r["emotion"], tuple(r["aus"]), r["description"],
                     {int(k): float(v) for k, v in r["intensities"].items()}) for r in obj["records"]]
