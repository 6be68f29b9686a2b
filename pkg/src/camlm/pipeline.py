"""Paragraph-level recurrence: memory updates, LM calls, and context cost."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import lm as lmmod
from . import tensor as T
from .cam import CamParams, cam_forward_batch, init_cam, initial_memory
from .corpus import ParagraphSample
from .lm import LmConfig, LmParams
from .optim import ParameterSet
from .tensor import ContractError, Tensor, no_grad


@dataclass
class Models:
    cfg: LmConfig
    params: ParameterSet
    lm: LmParams
    cam_t: CamParams | None
    cam_s: CamParams | None


def build_models(cfg: LmConfig, seed: int = 0, n_encoder_blocks: int = 2, n_retrieve: int = 2,
                 learned_init_memory: bool = False) -> Models:
    """Initialize LM and (enabled) CAM blocks from one seeded generator."""
    if cfg.d_model % cfg.n_heads:
        raise ContractError("d_model must be divisible by n_heads")
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    lm = lmmod.init_lm(ps, cfg, rng)
    cams = {}
    for name, used in (("cam_t", cfg.use_mem_t), ("cam_s", cfg.use_mem_s)):
        cams[name] = (init_cam(ps, name, cfg.d_model, cfg.n_slots, cfg.n_heads, rng,
                               n_encoder_blocks, n_retrieve, learned_init_memory) if used else None)
    return Models(cfg, ps, lm, cams["cam_t"], cams["cam_s"])


@dataclass
class ParagraphState:
    """Memory and previous-sentence history for a batch of paragraphs."""
    mem_t: Tensor | None
    mem_s: Tensor | None
    prev_text: list[list[int]]
    prev_speech: list[list[int]]
    n: int = 0

    def detached(self) -> "ParagraphState":
        return ParagraphState(None if self.mem_t is None else self.mem_t.detach(),
                              None if self.mem_s is None else self.mem_s.detach(),
                              self.prev_text, self.prev_speech, self.n)


def init_state(models: Models, batch: int = 1) -> ParagraphState:
    """Dummy history (one blank text / one silence token) and initial memory."""
    cfg = models.cfg
    d = cfg.d_model
    return ParagraphState(
        mem_t=initial_memory(models.cam_t, batch, d) if models.cam_t else None,
        mem_s=initial_memory(models.cam_s, batch, d) if models.cam_s else None,
        prev_text=[[cfg.blank_text] for _ in range(batch)],
        prev_speech=[[cfg.sil_speech] for _ in range(batch)],
        n=0,
    )


def update_memories(state: ParagraphState, texts: Sequence[Sequence[int]], models: Models):
    """Both memory steps for sentence ``n``; the query always comes from ``texts``."""
    lm = models.lm
    mem_t = mem_s = None
    if models.cam_t is not None:
        mem_t = cam_forward_batch(models.cam_t, lm.text_embed, lm.text_embed, texts, state.mem_t, state.prev_text)
    if models.cam_s is not None:
        mem_s = cam_forward_batch(models.cam_s, lm.text_embed, lm.speech_embed, texts, state.mem_s, state.prev_speech)
    return mem_t, mem_s


def step_train(state: ParagraphState, texts, speeches, x_vec, models: Models) -> tuple[Tensor, ParagraphState]:
    """Teacher-forced sentence step: returns the sentence loss and the next state."""
    mem_t, mem_s = update_memories(state, texts, models)
    asm = lmmod.assemble(models.cfg, models.lm, x_vec, mem_t, mem_s, texts, speeches)
    logits = lmmod.forward(asm, models.lm, models.cfg.mask_kind)
    new_state = ParagraphState(mem_t, mem_s, [list(t) for t in texts], [list(s) for s in speeches], state.n + 1)
    return lmmod.loss(asm, logits), new_state


def _as_batch(samples) -> list[ParagraphSample]:
    samples = [samples] if isinstance(samples, ParagraphSample) else list(samples)
    if len({s.n_sentences for s in samples}) != 1:
        raise ContractError("all paragraphs in a batch must have the same sentence count")
    return samples


def parse_bptt(bptt: str | int | None) -> int | None:
    """``"full"``/``None`` -> None; ``"truncate_k"`` or ``k`` -> window size ``k``."""
    if bptt in (None, "full"):
        return None
    if isinstance(bptt, int):
        return bptt
    if isinstance(bptt, str) and bptt.startswith("truncate_"):
        return int(bptt.split("_", 1)[1])
    raise ContractError(f"unrecognized bptt setting {bptt!r}")


def train_paragraph(samples, models: Models, bptt: str | int | None = "full") -> Tensor:
    """Mean per-sentence loss over a batch of paragraphs, unrolled through memory.

    With a truncation window ``k`` the memory entering every ``k``-th sentence
    is treated as a constant.
    """
    samples = _as_batch(samples)
    window = parse_bptt(bptt)
    x_vec = np.stack([s.x_vec for s in samples])
    state = init_state(models, len(samples))
    losses = []
    for n in range(samples[0].n_sentences):
        if window is not None and n > 0 and n % window == 0:
            state = state.detached()
        texts = [s.texts[n] for s in samples]
        speeches = [s.speeches[n] for s in samples]
        loss_n, state = step_train(state, texts, speeches, x_vec, models)
        losses.append(loss_n)
    return T.mean_of(losses)


@dataclass
class SentenceEval:
    """Teacher-forced per-sentence argmax predictions and their targets."""
    predictions: list[np.ndarray]
    targets: list[np.ndarray]
    losses: list[float]


def teacher_forced_eval(samples, models: Models) -> list[SentenceEval]:
    """Per-paragraph argmax predictions at every loss position, sentence by sentence."""
    samples = _as_batch(samples)
    x_vec = np.stack([s.x_vec for s in samples])
    out = [SentenceEval([], [], []) for _ in samples]
    with no_grad():
        state = init_state(models, len(samples))
        for n in range(samples[0].n_sentences):
            texts = [s.texts[n] for s in samples]
            speeches = [s.speeches[n] for s in samples]
            mem_t, mem_s = update_memories(state, texts, models)
            asm = lmmod.assemble(models.cfg, models.lm, x_vec, mem_t, mem_s, texts, speeches)
            logits = lmmod.forward(asm, models.lm, models.cfg.mask_kind).data
            logp = T.log_softmax_np(logits)
            for b in range(len(samples)):
                m = asm.loss_mask[b]
                tgt = asm.targets[b, m]
                out[b].predictions.append(logits[b, m].argmax(axis=-1))
                out[b].targets.append(tgt)
                out[b].losses.append(float(-logp[b, m][np.arange(len(tgt)), tgt].sum()))
            state = ParagraphState(mem_t, mem_s, texts, speeches, state.n + 1)
    return out


def synthesize_paragraph(sentences, x_vec, models: Models, rng: np.random.Generator,
                         temperature: float | None = None):
    """Generate speech sentence by sentence, feeding generated speech back as history.

    ``sentences`` is one paragraph (list of token lists) or a batch of them;
    ``x_vec`` is ``d_x`` or ``B×d_x`` accordingly. Returns ``(speech, report)``
    for a single paragraph, lists of both for a batch.
    """
    single = len(sentences) > 0 and isinstance(sentences[0][0], (int, np.integer))
    batch = [sentences] if single else list(sentences)
    if len({len(p) for p in batch}) != 1:
        raise ContractError("all paragraphs in a batch must have the same sentence count")
    xv = np.asarray(x_vec, dtype=np.float64).reshape(len(batch), -1)
    cfg = models.cfg
    outputs: list[list[list[int]]] = [[] for _ in batch]
    with no_grad():
        state = init_state(models, len(batch))
        for n in range(len(batch[0])):
            texts = [p[n] for p in batch]
            mem_t, mem_s = update_memories(state, texts, models)
            gen = lmmod.generate(cfg, models.lm, xv, mem_t, mem_s, texts, rng, temperature)
            for b, toks in enumerate(gen.tokens):
                outputs[b].append(toks)
            # an empty generation would leave no history; fall back to silence
            history = [toks if toks else [cfg.sil_speech] for toks in gen.tokens]
            state = ParagraphState(mem_t, mem_s, [list(t) for t in texts], history, state.n + 1)
    reports = [context_cost("proposed", p, cfg) for p in batch]
    return (outputs[0], reports[0]) if single else (outputs, reports)


# ---------------------------------------------------------------------------
# context-cost accounting

STRATEGIES = ("proposed", "full_prompt", "k_window")
K_WINDOW_CONTEXTS = 5
K_WINDOW_PREFIX = 64


@dataclass
class CostReport:
    strategy: str
    num_contexts: list[int]
    prefix_lens: list[int]          # context-derived prefix tokens per sentence
    total_prefix_lens: list[int]    # x-vector slot + context tokens + own text
    prefix_len_fixed: int | None
    totals: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "num": self.num_contexts[0] if len(set(self.num_contexts)) == 1 else self.num_contexts,
            "prefix_len_fixed": self.prefix_len_fixed,
            "per_sentence_prefix_lens": self.prefix_lens,
            "per_sentence_total_prefix_lens": self.total_prefix_lens,
            "totals": self.totals,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _paragraph_parts(paragraph) -> tuple[list[list[int]], list[list[int]] | None]:
    if isinstance(paragraph, ParagraphSample):
        return paragraph.texts, paragraph.speeches
    return list(paragraph), None


def context_cost(strategy: str, paragraph, cfg: LmConfig) -> CostReport:
    """Count contexts and context-derived prefix tokens per sentence.

    * ``proposed``: one context (the previous sentence, or the dummy history)
      and ``L`` memory tokens per enabled memory.
    * ``full_prompt``: one context, whose full text+speech tokens become prefix.
    * ``k_window``: five contexts compressed to 64 fixed tokens.

    ``total_prefix_lens`` adds the x-vector slot and the sentence's own text.
    ``paragraph`` is a :class:`ParagraphSample` or a list of text token lists
    (then ``full_prompt`` needs speech and is rejected).
    """
    texts, speeches = _paragraph_parts(paragraph)
    nums, ctx, full = [], [], []
    for n, text in enumerate(texts):
        if strategy == "proposed":
            num, c = 1, cfg.n_slots * (int(cfg.use_mem_t) + int(cfg.use_mem_s))
        elif strategy == "full_prompt":
            if speeches is None:
                raise ContractError("full_prompt accounting needs speech tokens")
            num = 1
            c = len(texts[n - 1]) + len(speeches[n - 1]) if n > 0 else 2  # dummy history: 1 + 1
        elif strategy == "k_window":
            num, c = K_WINDOW_CONTEXTS, K_WINDOW_PREFIX
        else:
            raise ContractError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        nums.append(num)
        ctx.append(c)
        full.append(1 + c + len(text))
    fixed = ctx[0] if strategy != "full_prompt" else None
    totals = {"contexts": sum(nums), "context_prefix_tokens": sum(ctx), "prefix_tokens": sum(full)}
    return CostReport(strategy, nums, ctx, full, fixed, totals)
