import numpy as np
import pytest

from weakftm.corpus import CorpusConfig, Label, Lattice, synth_lattice


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_lattices(n, seed=0, snr=5.0, config=None):
    config = config or CorpusConfig()
    out = []
    for i in range(n):
        label = Label.UNINTENDED if i % 2 else Label.INTENDED
        out.append(synth_lattice(label, snr, np.random.default_rng([seed, i]), config))
    return out


def chain_lattice(words, am, lm):
    n = len(words) + 1
    return Lattice(
        n_nodes=n,
        src=np.arange(n - 1),
        dst=np.arange(1, n),
        word=np.asarray(words),
        am_score=np.asarray(am, dtype=float),
        lm_score=np.asarray(lm, dtype=float),
        posterior=np.ones(n - 1),
    )


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
