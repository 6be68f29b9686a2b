import numpy as np
import pytest

from camlm.lm import LmConfig
from camlm.optim import ParameterSet
from camlm.pipeline import build_models
from camlm.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return LmConfig(d_model=16, n_heads=4, n_layers=1, n_slots=4, text_vocab=8, speech_vocab=8)


@pytest.fixture
def tiny_models(tiny_cfg):
    return build_models(tiny_cfg, seed=7)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build_loss, arrays: dict[str, np.ndarray], tol: float = 1e-5) -> float:
    """Grad-check ``build_loss(tensors)`` w.r.t. every array; returns the max relative error."""
    ps = ParameterSet()
    for name, a in arrays.items():
        ps.add(name, Tensor(a, requires_grad=True))
    tensors = {n: ps[n] for n in ps}
    build_loss(tensors).backward()
    worst = 0.0
    for name in ps:
        analytic = ps[name].grad.copy()
        numeric = numeric_grad(lambda: build_loss(tensors).item(), ps[name].data)
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(err.max()))
    assert worst < tol, worst
    return worst


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records one acceptance line for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
