"""Parameter containers, Adam, and the finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import ContractError, Tensor, no_grad

INIT_STD = 0.02


class ParameterSet:
    """Named trainable tensors with a stable (insertion) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        if not t.requires_grad:
            t = Tensor(t.data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())


def normal_init(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParameterSet, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; zeroes gradients afterwards."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad.fill(0.0)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: ParameterSet, h: float = 1e-5,
               names: list[str] | None = None, max_coords: int | None = None,
               seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients of ``f()`` with central differences.

    Returns the max relative error per parameter name. ``max_coords`` caps the
    number of (seeded, randomly chosen) coordinates checked per tensor.
    """
    names = params.names() if names is None else names
    params.zero_grad()
    f().backward()
    analytic = {n: params[n].grad.copy() for n in names}
    params.zero_grad()
    rng = np.random.default_rng(seed)
    report = {}
    with no_grad():
        for n in names:
            p = params[n]
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(len(coords))
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (2 * h)
            report[n] = float(relative_error(analytic[n].reshape(-1)[coords], numeric).max())
    return report
