from pathlib import Path

import numpy as np
import pytest

from attrirob.ndcore import MlpModel, forward_cache, init_mlp, make_rng

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist1k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist1k-labels-idx1-ubyte.gz"


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def central_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def margin_to_boundary(model: MlpModel, X) -> float:
    _, pre = forward_cache(model, np.atleast_2d(X))
    return min(float(np.abs(z).min()) for z in pre) if pre else np.inf


def random_net(seed, sizes=(4, 6, 5, 3), zero_bias=False) -> MlpModel:
    return init_mlp(list(sizes), seed=seed, zero_bias=zero_bias)


def safe_point(model: MlpModel, rng, margin=1e-3, lo=0.0, hi=1.0):
    """Draw a point whose hidden pre-activations all sit at least ``margin`` from 0."""
    for _ in range(1000):
        x = rng.uniform(lo, hi, size=model.input_dim)
        if margin_to_boundary(model, x) >= margin:
            return x
    raise RuntimeError("no point away from activation boundaries")


@pytest.fixture
def rng():
    return make_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
