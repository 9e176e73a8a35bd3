import numpy as np
import pytest

from handdiff import autodiff as ad


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_grads(build, leaves, eps=1e-5):
    """Return the worst relative error between analytic and numeric gradients
    of the scalar ``build()`` w.r.t. every leaf tensor."""
    for t in leaves:
        t.grad = None
    loss = build()
    ad.backward(loss)
    worst = 0.0
    for t in leaves:
        num = numeric_grad(lambda: build().item(), t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> result line, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
