import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mustkd.asr import AsrHyper, Vocab, train_asr  # noqa: E402
from mustkd.mapping import MesdHyper, train_mesd  # noqa: E402
from mustkd.synth import FamilyConfig, generate_corpus, generate_family  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def family():
    """Three small languages; a and b share most of their units."""
    cfg = FamilyConfig(["a", "b", "c"], [[1, 0.75, 0.25], [0.75, 1, 0.25], [0.25, 0.25, 1]], [4, 4, 4], seed=3)
    return {s.language_id: s for s in generate_family(cfg)}


@pytest.fixture(scope="session")
def tiny_models(family):
    """Briefly trained ASRs for every language plus a mapping model into ``a``."""
    corpora = {lang: generate_corpus(spec, 24, seed=i, length_range=(2, 4)) for i, (lang, spec) in enumerate(family.items())}
    hyper = AsrHyper(epochs=3, hidden=8, embed=4, batch_size=8)
    asrs = {lang: train_asr(corpora[lang], Vocab(tuple(family[lang].characters)), hyper) for lang in family}
    mesd = train_mesd(asrs["a"], [asrs["b"], asrs["c"]], corpora["a"], MesdHyper(epochs=2, hidden=6, batch_size=8))
    return {"corpora": corpora, "asr": asrs, "mesd": mesd}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
