import numpy as np
import pytest

from catflowmap import autodiff as ad
from catflowmap.selfcheck import random_predictor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def net(rng):
    return random_predictor(rng, D=3, K=3, width=12)


def fd_grad(fn, params, key, idx, eps=1e-6):
    """Central difference of scalar ``fn(params)`` in one coordinate."""
    plus = {k: np.array(v, copy=True) for k, v in params.items()}
    minus = {k: np.array(v, copy=True) for k, v in params.items()}
    plus[key][idx] += eps
    minus[key][idx] -= eps
    return (float(ad.value(fn(plus))) - float(ad.value(fn(minus)))) / (2 * eps)


def probe_coords(params, rng, per_tensor=3):
    for k, v in sorted(params.items()):
        if np.ndim(v) == 0:
            yield k, ()
            continue
        flat = rng.choice(np.size(v), size=min(per_tensor, np.size(v)), replace=False)
        for f in flat:
            yield k, np.unravel_index(f, np.shape(v))


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


class ConstantPredictor:
    """``pi_{s,t}(x) = c`` for every input; an exact flow map of its own dynamics."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def __call__(self, x, s, t):
        out = np.broadcast_to(self.c, np.shape(ad.value(x))).copy()
        return ad.Tensor(out)


# acceptance criteria register here; printed as one line each at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
