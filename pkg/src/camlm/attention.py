"""Masks, multi-head attention, and pre-norm transformer blocks.

Activations are batched ``B×T×d``; heads are folded into the batch axis so
every intermediate stays rank 3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import ParameterSet, normal_init
from .tensor import ContractError, Tensor


def make_causal_mask(size: int) -> np.ndarray:
    """``allowed[i, j] = j <= i``."""
    return np.tril(np.ones((size, size), dtype=bool))


def make_prefix_mask(prefix_len: int, size: int) -> np.ndarray:
    """Bidirectional inside the first ``prefix_len`` positions, causal after.

    Prefix positions never see the generated region.
    """
    if not 0 <= prefix_len <= size:
        raise ContractError(f"prefix length {prefix_len} must lie in [0, {size}]")
    allowed = make_causal_mask(size)
    allowed[:prefix_len, :prefix_len] = True
    return allowed


def check_mask(allowed: np.ndarray) -> None:
    if not allowed.any(axis=-1).all():
        raise ContractError("attention mask has a query row with no allowed key")


@dataclass
class Linear:
    w: Tensor
    b: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add(y, self.b)


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class AttentionParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    n_heads: int


@dataclass
class FeedForward:
    norm: Norm
    fc1: Linear
    fc2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        """Pre-norm FFN with residual."""
        return T.add(x, self.fc2(T.gelu(self.fc1(self.norm(x)))))


@dataclass
class TransformerBlockParams:
    norm: Norm
    attn: AttentionParams
    ffn: FeedForward


@dataclass
class CrossBlockParams:
    """Cross-attention sublayer (separate norms for queries and keys) + FFN."""
    q_norm: Norm
    kv_norm: Norm
    attn: AttentionParams
    ffn: FeedForward


def init_linear(ps: ParameterSet, name: str, d_in: int, d_out: int, rng, bias: bool = True,
                std: float | None = None) -> Linear:
    """Weights default to std ``1/sqrt(d_in)`` so activations keep unit scale through the stack."""
    std = 1.0 / np.sqrt(d_in) if std is None else std
    return Linear(ps.add(f"{name}.w", normal_init(rng, (d_in, d_out), std)),
                  ps.add(f"{name}.b", np.zeros(d_out)) if bias else None)


def init_norm(ps: ParameterSet, name: str, d: int) -> Norm:
    return Norm(ps.add(f"{name}.gamma", np.ones(d)), ps.add(f"{name}.beta", np.zeros(d)))


def init_attention(ps: ParameterSet, name: str, d: int, n_heads: int, rng) -> AttentionParams:
    if d % n_heads:
        raise ContractError(f"d_model {d} is not divisible by n_heads {n_heads}")
    # a key bias shifts every logit of a query row equally, so it is left out
    return AttentionParams(*(init_linear(ps, f"{name}.{p}", d, d, rng, bias=p != "k") for p in "qkvo"),
                           n_heads=n_heads)


def init_ffn(ps: ParameterSet, name: str, d: int, rng) -> FeedForward:
    return FeedForward(init_norm(ps, f"{name}.norm", d),
                       init_linear(ps, f"{name}.fc1", d, 4 * d, rng),
                       init_linear(ps, f"{name}.fc2", 4 * d, d, rng))


def init_block(ps: ParameterSet, name: str, d: int, n_heads: int, rng) -> TransformerBlockParams:
    return TransformerBlockParams(init_norm(ps, f"{name}.norm", d),
                                  init_attention(ps, f"{name}.attn", d, n_heads, rng),
                                  init_ffn(ps, f"{name}.ffn", d, rng))


def init_cross_block(ps: ParameterSet, name: str, d: int, n_heads: int, rng) -> CrossBlockParams:
    return CrossBlockParams(init_norm(ps, f"{name}.q_norm", d),
                            init_norm(ps, f"{name}.kv_norm", d),
                            init_attention(ps, f"{name}.attn", d, n_heads, rng),
                            init_ffn(ps, f"{name}.ffn", d, rng))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_h)) v with disallowed logits pushed to -1e30."""
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax_rows(scores, mask)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _head_mask(mask: np.ndarray | None, n_heads: int) -> np.ndarray | None:
    if mask is None or mask.ndim == 2:
        return mask
    return np.repeat(mask, n_heads, axis=0)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, p: AttentionParams,
                         mask: np.ndarray | None = None) -> Tensor:
    """Project, attend per head, merge, and output-project. Inputs are ``B×T×d``."""
    h = p.n_heads
    q = T.split_heads(p.q(x_q), h)
    k = T.split_heads(p.k(x_kv), h)
    v = T.split_heads(p.v(x_kv), h)
    return p.o(T.merge_heads(scaled_dot_attention(q, k, v, _head_mask(mask, h)), h))


def multi_head_self_attention(x: Tensor, p: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    return multi_head_attention(x, x, p, mask)


def multi_head_cross_attention(x_q: Tensor, x_kv: Tensor, p: AttentionParams,
                               key_valid: np.ndarray | None = None) -> Tensor:
    """Every query attends every (valid) key; ``key_valid`` is ``B×n_k``."""
    mask = None if key_valid is None else np.broadcast_to(
        key_valid[:, None, :], (x_q.shape[0], x_q.shape[1], x_kv.shape[1]))
    return multi_head_attention(x_q, x_kv, p, mask)


def transformer_block(x: Tensor, p: TransformerBlockParams, mask: np.ndarray | None = None) -> Tensor:
    """LN -> self-attention -> residual, then LN -> FFN -> residual."""
    x = T.add(x, multi_head_self_attention(p.norm(x), p.attn, mask))
    return p.ffn(x)


def cross_block(x_q: Tensor, x_kv: Tensor, p: CrossBlockParams,
                key_valid: np.ndarray | None = None) -> Tensor:
    x = T.add(x_q, multi_head_cross_attention(p.q_norm(x_q), p.kv_norm(x_kv), p.attn, key_valid))
    return p.ffn(x)
