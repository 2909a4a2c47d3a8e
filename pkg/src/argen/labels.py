"""Emotion labels and the action-unit inventory shared across modules."""

EMOTIONS = ("HA", "SA", "NE", "AN", "SU", "DI", "FE")
SCARCE = ("SU", "DI", "FE")
NON_SCARCE = tuple(e for e in EMOTIONS if e not in SCARCE)

EMOTION_NAMES = {
    "HA": "happiness",
    "SA": "sadness",
    "NE": "a neutral expression",
    "AN": "anger",
    "SU": "surprise",
    "DI": "disgust",
    "FE": "fear",
}

AU_IDS = (1, 2, 4, 5, 9, 15, 20, 26)
K_AU = len(AU_IDS)
N_IDENTITY = 4
LATENT_DIM = N_IDENTITY + K_AU
AU_SLOT = {au: N_IDENTITY + i for i, au in enumerate(AU_IDS)}

AU_PHRASES = {
    1: "raised inner brows",
    2: "raised outer brows",
    4: "lowered, drawn-together brows",
    5: "widened upper eyelids",
    9: "wrinkled nose",
    15: "depressed lip corners",
    20: "horizontally stretched lips",
    26: "dropped jaw",
}


def label_index(label: str) -> int:
    try:
        return EMOTIONS.index(label)
    except ValueError:
        raise ValueError(f"unknown emotion label {label!r}") from None
