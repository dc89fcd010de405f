from pathlib import Path

import numpy as np
import pytest

from dpgbdt.data import Dataset, FeatureSpec

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# Filled by test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES: dict = {}


class ZeroNoise:
    """Stand-in generator whose Gaussian and Laplace draws are exactly zero."""

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.zeros(size) + loc if size is not None else float(loc)

    def laplace(self, loc=0.0, scale=1.0, size=None):
        return np.zeros(size) + loc if size is not None else float(loc)

    def random(self, size=None):
        return np.zeros(size) if size is not None else 0.0


class RecordingRng:
    """Wraps a Generator and keeps every array returned by ``normal``."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.normals = []

    def normal(self, loc=0.0, scale=1.0, size=None):
        out = self.rng.normal(loc, scale, size)
        self.normals.append(np.asarray(out))
        return out


@pytest.fixture
def zero_noise():
    return ZeroNoise()


def toy_schema():
    return (FeatureSpec.numerical("a", 0.0, 1.0),
            FeatureSpec.numerical("b", -5.0, 5.0),
            FeatureSpec.categorical("c", ["x", "y", "z"]))


def toy_dataset(n=200, seed=0, task="regression"):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.random(n), rng.uniform(-5, 5, n), rng.integers(0, 3, n)])
    signal = 2.0 * X[:, 0] - 0.3 * X[:, 1] + (X[:, 2] == 1)
    if task == "classification":
        y = (signal + rng.normal(0, 0.5, n) > 1.0).astype(float)
    else:
        y = signal + rng.normal(0, 0.1, n)
    return Dataset(X, y, toy_schema(), task)


@pytest.fixture
def toy():
    return toy_dataset()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
