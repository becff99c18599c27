import numpy as np
import pytest

from mile.nn import MlpArchitecture
from mile.posterior import Likelihood, PosteriorModel, Prior


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def make_regression_model(widths=(3, 8, 2), n=40, seed=0):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(widths)
    x = rng.normal(size=(n, widths[0]))
    y = np.sin(x[:, 0]) + 0.1 * rng.normal(size=n)
    return PosteriorModel(arch, Prior(), Likelihood("gaussian"), x, y)


def make_classification_model(widths=(3, 6, 3), n=40, seed=0):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(widths)
    x = rng.normal(size=(n, widths[0]))
    y = rng.integers(0, widths[-1], size=n)
    return PosteriorModel(arch, Prior(), Likelihood("categorical"), x, y)


@pytest.fixture
def regression_model():
    return make_regression_model()


@pytest.fixture
def classification_model():
    return make_classification_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
