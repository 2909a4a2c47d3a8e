import numpy as np
import pytest

from argen import diffusion, face, kb, video
from argen.labels import AU_IDS, EMOTIONS, SCARCE


def small_domain_config():
    return face.DomainConfig(n_identities=6, train_counts={e: (4 if e in SCARCE else 8) for e in EMOTIONS},
                             test_counts={e: 3 for e in EMOTIONS})


@pytest.fixture(scope="session")
def small_dataset():
    return face.synthesize_dataset(small_domain_config(), np.random.default_rng(11))


@pytest.fixture(scope="session")
def trained_small(small_dataset):
    """Default-config denoiser on a small domain: (theta, loss history, training set, references)."""
    train = small_dataset.split("train")
    _, _, _, x_v = face.partition_dataset(train)
    refs = {x.identity_id: x.latent for x in x_v}
    knowledge = kb.default_knowledge_base()
    pats = face.class_patterns(knowledge)
    rng = np.random.default_rng(12)
    conds, references = [], []
    for clip in train.clips:
        ident = small_dataset.identities[clip.identity_id]
        if clip.label in SCARCE:
            p = kb.make_prompt(clip.identity_id, ident, clip.label, knowledge, 2, rng)
        else:
            p = kb.pattern_prompt(clip.identity_id, ident, clip.label,
                                  {au: pats[clip.label][i] for i, au in enumerate(AU_IDS)})
        conds.append(p.c)
        references.append(refs.get(clip.identity_id, clip.latents[0]))
    data = video.build_training_set(train.clips, conds, references)
    theta, hist = diffusion.train_denoiser(data, diffusion.build_schedule(), diffusion.DenoiserTrainConfig(),
                                           np.random.default_rng(13))
    return theta, hist, data, x_v


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def log(criterion, ok, detail=""):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
