import numpy as np
import pytest

from bnfp.cells import CellTable


def random_table(rng, J, kind, n=None):
    """Cell table with exactly J distinct weights and n units (at least one per cell)."""
    n = n if n is not None else 3 * J + 5
    levels = np.sort(rng.uniform(0.2, 5.0, size=J))
    idx = np.concatenate([np.arange(J), rng.integers(0, J, size=n - J)])
    w = levels[idx]
    if kind == "binary":
        y = rng.integers(0, 2, size=n).astype(float)
    else:
        y = rng.normal(1.0 + np.log(w), 1.0)
    return CellTable.from_arrays(w, y, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
