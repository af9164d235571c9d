import numpy as np
import pytest

from fedbens.nn import ModelSpec, init_params

ACCEPTANCE_LINES: list[str] = []


def random_net(rng, dims, activation="tanh", n=12, scale=1.0):
    """Random (spec, params, x, y) with params drawn wider than the init for non-trivial curvature."""
    spec = ModelSpec(tuple(dims), activation)
    params = scale * rng.standard_normal(spec.n_params) / np.sqrt(dims[0])
    x = rng.standard_normal((n, dims[0]))
    y = rng.integers(0, dims[-1], size=n)
    return spec, params, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_net(rng):
    return random_net(rng, (4, 5, 3))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
