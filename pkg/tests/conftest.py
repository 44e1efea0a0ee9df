import numpy as np
import pytest

from vimoe import numerics as nx


def numeric_grad(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[idx]`` (perturbed in place)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_grads(build_loss, params, rng, samples=6, tol=1e-4):
    """Compare tape gradients of ``build_loss()`` with central differences."""
    for p in params:
        p.grad = None
    with nx.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in picks:
            num = numeric_grad(lambda: build_loss().item(), flat, i)
            ana = p.grad.reshape(-1)[i]
            assert abs(num - ana) <= tol * max(1e-6, abs(num) + abs(ana)) + 1e-9, (num, ana)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -----------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
