import numpy as np
import pytest

from detbench.metrics import ScoreEntry, ScoreSet

# (name, "PASS"/"FAIL", seconds) tuples filled in by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[str, str, float]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, status, seconds in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{status}] {name} ({seconds:.1f}s)")


def random_scoreset(gen: np.random.Generator, n: int | None = None, groups: int = 1) -> ScoreSet:
    """Random score set with both classes guaranteed present."""
    if n is None:
        n = int(gen.integers(10, 2001))
    labels = gen.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    probs = gen.random(n)
    tags = [f"g{int(gen.integers(groups))}" for _ in range(n)]
    entries = [
        ScoreEntry(f"s{i}", tags[i], float(probs[i]), int(labels[i])) for i in range(n)
    ]
    return ScoreSet(entries)


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def rgb(gen) -> np.ndarray:
    return gen.integers(0, 256, (96, 128, 3)).astype(np.uint8)
