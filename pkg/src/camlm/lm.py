"""Decoder-only LM over ``[x_vec, Mem-T, Mem-S, text, BOS speech...]``.

The first ``1 + 2L + S`` positions form the prefix (bidirectional under the
prefix mask); the speech suffix starts with BOS and is generated causally.
Only suffix positions contribute to the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (Linear, Norm, TransformerBlockParams, init_block, init_linear,
                        init_norm, make_causal_mask, make_prefix_mask, transformer_block)
from .cam import pad_tokens
from .optim import INIT_STD, ParameterSet, normal_init
from .tensor import ContractError, Tensor, no_grad

# segment ids used by the "segment" position scheme
SEG_XVEC, SEG_MEM_T, SEG_MEM_S, SEG_TEXT, SEG_SPEECH = range(5)


@dataclass
class LmConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_slots: int = 8
    text_vocab: int = 16
    speech_vocab: int = 16
    d_xvec: int = 8
    max_positions: int = 128
    max_generate_factor: int = 4
    temperature: float = 1.0
    pos_scheme: str = "absolute"
    use_mem_t: bool = True
    use_mem_s: bool = True
    mask_kind: str = "prefix"

    # reserved ids live just past the content vocabularies
    @property
    def blank_text(self) -> int:
        return self.text_vocab

    @property
    def sil_speech(self) -> int:
        return self.speech_vocab

    @property
    def bos_speech(self) -> int:
        return self.speech_vocab + 1

    @property
    def eos_speech(self) -> int:
        return self.speech_vocab + 2

    @property
    def text_table_size(self) -> int:
        return self.text_vocab + 1

    @property
    def speech_table_size(self) -> int:
        return self.speech_vocab + 3

    def prefix_len(self, n_text: int) -> int:
        return 1 + self.n_slots * (int(self.use_mem_t) + int(self.use_mem_s)) + n_text


@dataclass
class LmParams:
    text_embed: Tensor
    speech_embed: Tensor
    xvec_proj: Linear
    pos_embed: Tensor
    seg_embed: Tensor | None
    blocks: list[TransformerBlockParams]
    final_norm: Norm
    head: Linear


def init_lm(ps: ParameterSet, cfg: LmConfig, rng) -> LmParams:
    d = cfg.d_model
    return LmParams(
        text_embed=ps.add("lm.text_embed", normal_init(rng, (cfg.text_table_size, d))),
        speech_embed=ps.add("lm.speech_embed", normal_init(rng, (cfg.speech_table_size, d))),
        xvec_proj=init_linear(ps, "lm.xvec_proj", cfg.d_xvec, d, rng),
        pos_embed=ps.add("lm.pos_embed", normal_init(rng, (cfg.max_positions, d))),
        seg_embed=(ps.add("lm.seg_embed", normal_init(rng, (5, d)))
                   if cfg.pos_scheme == "segment" else None),
        blocks=[init_block(ps, f"lm.block.{i}", d, cfg.n_heads, rng) for i in range(cfg.n_layers)],
        final_norm=init_norm(ps, "lm.final_norm", d),
        head=init_linear(ps, "lm.head", d, cfg.speech_table_size, rng, std=INIT_STD),
    )


@dataclass
class Assembly:
    """A right-padded batch of assembled LM inputs."""
    embedded: Tensor            # B×T×d
    prefix_lens: np.ndarray     # B
    lengths: np.ndarray         # B, unpadded sequence lengths
    loss_mask: np.ndarray       # B×T
    targets: np.ndarray         # B×T (valid where loss_mask)
    segments: np.ndarray = field(repr=False, default=None)  # B×T segment ids

    @property
    def size(self) -> int:
        return self.embedded.shape[1]

    def attention_mask(self, mask_kind: str = "prefix") -> np.ndarray:
        size = self.size
        if mask_kind == "causal":
            return make_causal_mask(size)
        if mask_kind != "prefix":
            raise ContractError(f"unknown mask kind {mask_kind!r}")
        return np.stack([make_prefix_mask(int(p), size) for p in self.prefix_lens])


def assemble(cfg: LmConfig, params: LmParams, x_vec, mem_t: Tensor | None, mem_s: Tensor | None,
             texts: Sequence[Sequence[int]], speeches: Sequence[Sequence[int]]) -> Assembly:
    """Lay out ``[x_vec; mem_t; mem_s; text; BOS, speech]`` for each batch row.

    ``x_vec`` is ``B×d_x``; memories are ``B×L×d`` (``None`` when ablated);
    ``speeches`` may hold empty lists (generation seed state).
    """
    B = len(texts)
    if any(len(t) == 0 for t in texts):
        raise ContractError("assemble needs non-empty text")
    if len(speeches) != B:
        raise ContractError("texts and speeches must have the same batch size")
    x = Tensor(np.asarray(x_vec, dtype=np.float64).reshape(B, 1, -1))
    parts = [params.xvec_proj(x)]
    seg_ids = [SEG_XVEC]
    mem_rows = 0
    for mem, seg, used in ((mem_t, SEG_MEM_T, cfg.use_mem_t), (mem_s, SEG_MEM_S, cfg.use_mem_s)):
        if not used:
            continue
        if mem is None:
            raise ContractError("memory is enabled in the config but was not supplied")
        parts.append(mem)
        seg_ids += [seg] * mem.shape[1]
        mem_rows += mem.shape[1]
    text_ids, _ = pad_tokens(texts)
    speech_ids, _ = pad_tokens([[cfg.bos_speech, *s] for s in speeches])
    parts.append(T.embedding_lookup(params.text_embed, text_ids))
    parts.append(T.embedding_lookup(params.speech_embed, speech_ids))
    source = T.concat(parts, axis=1)

    text_base = 1 + mem_rows
    speech_base = text_base + text_ids.shape[1]
    lengths = np.array([1 + mem_rows + len(t) + 1 + len(s) for t, s in zip(texts, speeches)])
    prefix_lens = np.array([1 + mem_rows + len(t) for t in texts])
    size = int(lengths.max())
    idx = np.zeros((B, size), dtype=np.int64)
    offsets = np.zeros((B, size), dtype=np.int64)
    segments = np.full((B, size), SEG_SPEECH, dtype=np.int64)
    targets = np.zeros((B, size), dtype=np.int64)
    loss_mask = np.zeros((B, size), dtype=bool)
    for b, (t, s) in enumerate(zip(texts, speeches)):
        P = prefix_lens[b]
        idx[b, :text_base] = np.arange(text_base)
        idx[b, text_base:P] = text_base + np.arange(len(t))
        idx[b, P:lengths[b]] = speech_base + np.arange(len(s) + 1)
        segments[b, :text_base] = seg_ids
        segments[b, text_base:P] = SEG_TEXT
        offsets[b, :P] = np.concatenate([[0], np.arange(mem_rows) % max(cfg.n_slots, 1), np.arange(len(t))])
        offsets[b, P:] = np.arange(size - P)
        if len(s):
            targets[b, P:P + len(s) + 1] = [*s, cfg.eos_speech]
            loss_mask[b, P:P + len(s) + 1] = True

    embedded = T.gather_rows(source, idx)
    if cfg.pos_scheme == "segment":
        pos = T.add(T.embedding_lookup(params.pos_embed, offsets), T.embedding_lookup(params.seg_embed, segments))
    elif cfg.pos_scheme == "absolute":
        if size > cfg.max_positions:
            raise ContractError(f"sequence length {size} exceeds max_positions {cfg.max_positions}")
        pos = T.embedding_lookup(params.pos_embed, np.tile(np.arange(size), (B, 1)))
    else:
        raise ContractError(f"unknown position scheme {cfg.pos_scheme!r}")
    return Assembly(T.add(embedded, pos), prefix_lens, lengths, loss_mask, targets, segments)


def forward(assembly: Assembly, params: LmParams, mask_kind: str = "prefix", return_hidden: bool = False):
    """Logits ``B×T×V_s`` (and optionally the final-layer hidden states)."""
    mask = assembly.attention_mask(mask_kind)
    x = assembly.embedded
    for block in params.blocks:
        x = transformer_block(x, block, mask)
    logits = params.head(params.final_norm(x))
    return (logits, x) if return_hidden else logits


def loss(assembly: Assembly, logits: Tensor) -> Tensor:
    """Cross-entropy over speech-suffix positions only."""
    return T.masked_cross_entropy(logits, assembly.targets, assembly.loss_mask)


@dataclass
class Generation:
    tokens: list[list[int]]
    hit_cap: list[bool]


def generate(cfg: LmConfig, params: LmParams, x_vec, mem_t: Tensor | None, mem_s: Tensor | None,
             texts: Sequence[Sequence[int]], rng: np.random.Generator,
             temperature: float | None = None) -> Generation:
    """Sample speech tokens for a batch of sentences until EOS or the length cap.

    ``temperature < 1e-6`` switches to argmax. BOS and SIL are never sampled.
    """
    temperature = cfg.temperature if temperature is None else temperature
    B = len(texts)
    caps = [cfg.max_generate_factor * len(t) + 8 for t in texts]
    out: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    hit_cap = [False] * B
    banned = [cfg.bos_speech, cfg.sil_speech]
    with no_grad():
        while not all(done):
            asm = assemble(cfg, params, x_vec, mem_t, mem_s, texts, out)
            logits = forward(asm, params, cfg.mask_kind).data
            for b in range(B):
                if done[b]:
                    continue
                row = logits[b, asm.lengths[b] - 1].copy()
                row[banned] = -np.inf
                if temperature < 1e-6:
                    tok = int(np.argmax(row))
                else:
                    z = row / temperature
                    p = np.exp(z - z.max())
                    p /= p.sum()
                    tok = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
                    tok = min(tok, len(p) - 1)
                if tok == cfg.eos_speech:
                    done[b] = True
                    continue
                out[b].append(tok)
                if len(out[b]) >= caps[b]:
                    done[b] = hit_cap[b] = True
    return Generation(out, hit_cap)
