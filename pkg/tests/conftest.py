from __future__ import annotations

import numpy as np
import pytest

from ssgd.core import RngStream
from ssgd.synthetic import SyntheticOracle, generate_dataset

# the (2, 5, 7) instance used throughout the synthetic experiments
REF_W0 = (2.0, 5.0, 7.0)


@pytest.fixture(scope="session")
def small_problem():
    return generate_dataset(RngStream(11), [1.0, -2.0, 0.5], n_samples=400)


@pytest.fixture
def small_oracle(small_problem):
    return SyntheticOracle(small_problem)


@pytest.fixture(scope="session")
def ref_problem():
    return generate_dataset(RngStream(0, 99), REF_W0)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(fun, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
