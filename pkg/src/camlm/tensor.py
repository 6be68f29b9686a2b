"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that pushes the output gradient back into its
inputs; :meth:`Tensor.backward` walks the graph in reverse topological order.
Only the broadcasting patterns the models need are supported (trailing bias
vectors and scalar gates), nothing general.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -1e30
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference over frozen params)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of 3")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must hold a single value.
        """
        if self.data.size != 1:
            raise ContractError("backward() needs a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_trailing(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may be a vector broadcast along ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        n = b.shape[0]
        return _make(a.data + b.data, (a, b), lambda g: (g, _sum_to_trailing(g, n)), "add")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a single-element scalar gate."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if a.data.size == 1:
        a, b = b, a
        swap = True
    else:
        swap = False
    if b.data.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    s = b.data.reshape(())

    def backward(g):
        ga = g * s
        gb = np.sum(g * a.data).reshape(b.shape)
        return (gb, ga) if swap else (ga, gb)

    parents = (b, a) if swap else (a, b)
    return _make(a.data * s, parents, backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def one_minus(a: Tensor) -> Tensor:
    return _make(1.0 - a.data, (a,), lambda g: (-g,), "one_minus")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # two-branch form keeps exp() from overflowing for large |x|
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    d2 = d * d
    th = np.tanh(_GELU_C * d * (1.0 + 0.044715 * d2))
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * dinner),)

    return _make(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for ``m×k @ k×n``, ``B×m×k @ k×n`` and ``B×m×k @ B×k×n``."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (a.ndim in (2, 3) and b.ndim == 2) or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0])
    if not ok or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim == 3:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, t] = x[b, idx[b, t]]`` for a ``B×Z×d`` source."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (gx,)

    return _make(out, (x,), backward, "gather_rows")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``B×T×d`` -> ``(B·h)×T×(d/h)``."""
    B, T, d = x.shape
    dh = d // n_heads
    out = x.data.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3).reshape(B * n_heads, T, dh)

    def backward(g):
        return (g.reshape(B, n_heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, d),)

    return _make(out, (x,), backward, "split_heads")


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """Inverse of :func:`split_heads`."""
    Bh, T, dh = x.shape
    B = Bh // n_heads
    out = x.data.reshape(B, n_heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, n_heads * dh)

    def backward(g):
        return (g.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3).reshape(Bh, T, dh),)

    return _make(out, (x,), backward, "merge_heads")


# ---------------------------------------------------------------------------
# reductions and normalizers

def sum_all(x: Tensor) -> Tensor:
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.mean(x.data), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def softmax_rows(m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = allowed) replaces disallowed
    logits by ``-1e30`` before normalizing, so their weight is exactly zero.
    """
    z = m.data if mask is None else np.where(mask, m.data, NEG_INF)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _make(out, (m,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _sum_to_trailing(g * xhat, d), _sum_to_trailing(g, d)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# token ops

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape up to 2-D)."""
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    bad = np.argwhere((ids < 0) | (ids >= V))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"token id {int(ids[pos])} at position {pos} is outside vocabulary of size {V}")
    out = table.data[ids] if ids.size else np.zeros(ids.shape + (d,))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(out, (table,), backward, "embedding")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean token cross-entropy over positions where ``loss_mask`` is True.

    ``logits`` is ``...×V``; ``targets``/``loss_mask`` match its leading shape.
    Targets at unmasked positions are ignored.
    """
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask.shape != logits.shape[:-1] or targets.shape != loss_mask.shape:
        raise DimensionError(
            f"masked_cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {loss_mask.shape}")
    count = int(loss_mask.sum())
    if count == 0:
        raise ContractError("masked_cross_entropy needs at least one unmasked position")
    V = logits.shape[-1]
    safe_t = np.where(loss_mask, targets, 0)
    if ((safe_t < 0) | (safe_t >= V)).any():
        raise IndexError("masked_cross_entropy: target id outside vocabulary")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * loss_mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (loss_mask[..., None] * (g / count)),)

    return _make(np.asarray(loss), (logits,), backward, "masked_cross_entropy")


def mean_of(values: Iterable[Tensor]) -> Tensor:
    """Mean of same-shape tensors (used to average per-sentence losses)."""
    values = list(values)
    out = values[0]
    for v in values[1:]:
        out = add(out, v)
    return scale(out, 1.0 / len(values))
