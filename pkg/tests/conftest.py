import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_mask(rng, dims, kind=None):
    """Random blob-ish or noisy mask; sometimes empty."""
    kind = kind or rng.choice(["blob", "noise", "box", "empty"], p=[0.5, 0.2, 0.25, 0.05])
    if kind == "empty":
        return np.zeros(dims, bool)
    if kind == "noise":
        return rng.random(dims) < rng.uniform(0.05, 0.5)
    if kind == "box":
        m = np.zeros(dims, bool)
        lo = [rng.integers(0, d) for d in dims]
        hi = [rng.integers(l, d) + 1 for l, d in zip(lo, dims)]
        m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        return m
    idx = np.indices(dims).reshape(3, -1).T
    c = [rng.uniform(0, d) for d in dims]
    r = [rng.uniform(0.8, max(1.0, d / 2)) for d in dims]
    rho = (((idx - c) / r) ** 2).sum(axis=1)
    m = (rho <= 1).reshape(dims)
    return m ^ (rng.random(dims) < 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
