import numpy as np
import pytest

from upn import toy
from upn.embedder import train_embedder


@pytest.fixture(scope="session")
def corpus():
    return toy.make_corpus(seed=0)


@pytest.fixture(scope="session")
def embedder(corpus):
    return train_embedder([corpus.clips[s] for s in corpus.speaker_ids], seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid or rep.when != "call":
                continue
            detail = dict(rep.user_properties).get("verdict", rep.nodeid)
            lines.append(("PASS " if outcome == "passed" else "FAIL ") + detail)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
