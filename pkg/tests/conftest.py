import numpy as np
import pytest

from restoreplan.corpus import natural_crops


@pytest.fixture(scope="session")
def corpus():
    """Fixed 10-image natural corpus used by the paired degradation checks."""
    return natural_crops(10, 128, seed=0)


@pytest.fixture(scope="session")
def photo(corpus):
    return corpus[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def constant(value, h=32, w=32):
    return np.full((h, w, 3), float(value))


def numeric_grads(params, loss, h=1e-4):
    """Central finite differences of ``loss(params)`` for every entry of every tensor."""
    out = {}
    for name in params.names():
        arr = getattr(params, name)
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss(params)
            flat[i] = keep - h
            down = loss(params)
            flat[i] = keep
            gf[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_error(analytic, numeric):
    """Largest per-tensor ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    worst = 0.0
    for k in analytic:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        scale = max(np.abs(a).max(), np.abs(n).max())
        if scale > 0:
            worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
