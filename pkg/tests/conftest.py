import numpy as np
import pytest

from dralign.data import synth_biased
from dralign.network import MlpParams, MlpSpec, init


def random_net(seed: int, dims=(2, 4, 1), scale: float = 1.0) -> MlpParams:
    """Small MLP with non-zero random biases so relu kinks are rarely hit."""
    spec = MlpSpec(dims[0], tuple(dims[1:-1]))
    params = init(spec, seed)
    rng = np.random.default_rng(seed + 1000)
    params.weights *= scale
    params.biases = [rng.normal(0.0, 0.3, b.shape) for b in params.biases]
    return params


def random_batch(rng: np.random.Generator, n: int, d: int = 2):
    X = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.5).astype(float)
    if y.min() == y.max():
        y[0] = 1.0 - y[0]
    return X, y


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.fixture
def small_synth():
    return synth_biased(400, d=3, bias=0.8, seed=3)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line-per-criterion acceptance verdicts at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
