"""Context-aware memory block: compress, retrieve, gated update.

Two independent instances are built per model, one reading text history
(``cam_t``) and one reading speech history (``cam_s``). Both build their
retrieval query from the *current* sentence's text.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (CrossBlockParams, TransformerBlockParams, cross_block,
                        init_block, init_cross_block, multi_head_cross_attention,
                        transformer_block)
from .optim import ParameterSet, normal_init
from .tensor import ContractError, Tensor


def pad_tokens(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token lists into ``(ids, valid)`` arrays of shape ``B×max_len``."""
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


@dataclass
class CamParams:
    latent_queries: Tensor
    resampler: CrossBlockParams
    history_encoder: list[TransformerBlockParams]
    retrieve_stages: list[CrossBlockParams]
    gate_alpha: Tensor
    init_memory: Tensor | None = None

    @property
    def n_slots(self) -> int:
        return self.latent_queries.shape[0]


def init_cam(ps: ParameterSet, name: str, d: int, n_slots: int, n_heads: int, rng,
             n_encoder_blocks: int = 2, n_retrieve: int = 2, learned_init_memory: bool = False) -> CamParams:
    return CamParams(
        latent_queries=ps.add(f"{name}.latent_queries", normal_init(rng, (n_slots, d))),
        resampler=init_cross_block(ps, f"{name}.resampler", d, n_heads, rng),
        history_encoder=[init_block(ps, f"{name}.encoder.{i}", d, n_heads, rng)
                         for i in range(n_encoder_blocks)],
        retrieve_stages=[init_cross_block(ps, f"{name}.retrieve.{i}", d, n_heads, rng)
                         for i in range(n_retrieve)],
        gate_alpha=ps.add(f"{name}.gate_alpha", np.zeros(1)),
        init_memory=(ps.add(f"{name}.init_memory", normal_init(rng, (n_slots, d)))
                     if learned_init_memory else None),
    )


def _tile_rows(table: Tensor, batch: int) -> Tensor:
    return T.embedding_lookup(table, np.tile(np.arange(table.shape[0]), (batch, 1)))


def initial_memory(params: CamParams, batch: int, d: int) -> Tensor:
    if params.init_memory is not None:
        return _tile_rows(params.init_memory, batch)
    return Tensor(np.zeros((batch, params.n_slots, d)))


def compress_readout(text_emb: Tensor, params: CamParams, text_valid: np.ndarray | None = None) -> Tensor:
    """Raw cross-attention read-out of the latent queries (before any residual)."""
    q = _tile_rows(params.latent_queries, text_emb.shape[0])
    r = params.resampler
    return multi_head_cross_attention(r.q_norm(q), r.kv_norm(text_emb), r.attn, text_valid)


def compress(text_emb: Tensor, params: CamParams, text_valid: np.ndarray | None = None) -> Tensor:
    """Resample a variable-length ``B×S×d`` text embedding to ``B×L×d``."""
    if text_emb.shape[1] == 0 or (text_valid is not None and not text_valid.any(axis=1).all()):
        raise ContractError("compress needs at least one text token per sample")
    q = _tile_rows(params.latent_queries, text_emb.shape[0])
    return cross_block(q, text_emb, params.resampler, text_valid)


def fuse_history(mem_prev: Tensor, hist_emb: Tensor, params: CamParams,
                 hist_valid: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Concatenate ``[mem_prev; history]`` and run the bidirectional history encoder.

    Returns the fused sequence and its key-validity mask.
    """
    B, L, _ = mem_prev.shape
    if hist_emb.shape[1] == 0 or (hist_valid is not None and not hist_valid.any(axis=1).all()):
        raise ContractError("fuse_history needs at least one history token per sample")
    if hist_valid is None:
        hist_valid = np.ones(hist_emb.shape[:2], dtype=bool)
    valid = np.concatenate([np.ones((B, L), dtype=bool), hist_valid], axis=1)
    x = T.concat([mem_prev, hist_emb], axis=1)
    mask = np.broadcast_to(valid[:, None, :], (B, x.shape[1], x.shape[1]))
    for block in params.history_encoder:
        x = transformer_block(x, block, mask)
    return x, valid


def retrieve(query: Tensor, fused: Tensor, params: CamParams, fused_valid: np.ndarray | None = None) -> Tensor:
    """Stacked cross-attention reads of the fused context; returns the retrieved memory."""
    x = query
    for stage in params.retrieve_stages:
        x = cross_block(x, fused, stage, fused_valid)
    return x


def update(mem_star: Tensor, mem_prev: Tensor, alpha: Tensor) -> Tensor:
    """``g * mem_star + (1 - g) * mem_prev`` with scalar gate ``g = sigmoid(alpha)``."""
    g = T.sigmoid(alpha)
    return T.add(T.mul(g, mem_star), T.mul(T.one_minus(g), mem_prev))


def cam_forward_batch(params: CamParams, text_table: Tensor, hist_table: Tensor,
                      texts: Sequence[Sequence[int]], mem_prev: Tensor,
                      histories: Sequence[Sequence[int]]) -> Tensor:
    """Batched memory step: ``B`` target texts, ``B×L×d`` memories, ``B`` histories."""
    if any(len(t) == 0 for t in texts) or any(len(h) == 0 for h in histories):
        raise ContractError("cam_forward needs non-empty text and history token lists")
    text_ids, text_valid = pad_tokens(texts)
    hist_ids, hist_valid = pad_tokens(histories)
    query = compress(T.embedding_lookup(text_table, text_ids), params, text_valid)
    fused, fused_valid = fuse_history(mem_prev, T.embedding_lookup(hist_table, hist_ids), params, hist_valid)
    return update(retrieve(query, fused, params, fused_valid), mem_prev, params.gate_alpha)


def cam_forward(params: CamParams, text_table: Tensor, hist_table: Tensor, text_tokens: Sequence[int],
                mem_prev: Tensor, hist_tokens: Sequence[int]) -> Tensor:
    """Single-sample memory step on an ``L×d`` memory; returns the next ``L×d`` memory."""
    L, d = mem_prev.shape
    out = cam_forward_batch(params, text_table, hist_table, [text_tokens],
                            T.reshape(mem_prev, (1, L, d)), [hist_tokens])
    return T.reshape(out, (L, d))
