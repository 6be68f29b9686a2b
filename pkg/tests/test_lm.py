import math

import numpy as np
import pytest

from camlm import lm as L
from camlm.lm import LmConfig
from camlm.optim import AdamState, adam_step
from camlm.pipeline import build_models
from camlm.tensor import ContractError, Tensor


def memories(cfg, rng, batch=1):
    shape = (batch, cfg.n_slots, cfg.d_model)
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


def xvec(cfg, batch=1):
    v = np.zeros((batch, cfg.d_xvec))
    v[:, 0] = 1
    return v


@pytest.fixture
def lively(tiny_cfg):
    """Tiny model with larger weights so positional effects are far above rounding."""
    m = build_models(tiny_cfg, seed=3)
    rng = np.random.default_rng(5)
    for name, p in m.params.items():
        if p.data.ndim == 2:
            p.data[...] = rng.normal(size=p.shape) * 0.3
    return m


class TestAssemble:
    def test_layout_counts(self):
        cfg = LmConfig(d_model=16, n_slots=8)
        m = build_models(cfg, seed=0)
        mt, ms = memories(cfg, np.random.default_rng(0))
        asm = L.assemble(cfg, m.lm, xvec(cfg), mt, ms, [[1, 2, 3, 4, 5]], [[6, 7, 8]])
        assert asm.size == 26
        assert asm.prefix_lens[0] == 22
        assert asm.loss_mask.sum() == 4
        np.testing.assert_array_equal(np.flatnonzero(asm.loss_mask[0]), [22, 23, 24, 25])
        np.testing.assert_array_equal(asm.targets[0, 22:], [6, 7, 8, cfg.eos_speech])

    def test_memory_prefix_with_32_slots(self):
        cfg = LmConfig(d_model=8, n_heads=2, n_slots=32)
        assert cfg.prefix_len(0) - 1 == 64
        m = build_models(cfg, seed=0)
        mt, ms = memories(cfg, np.random.default_rng(0))
        asm = L.assemble(cfg, m.lm, xvec(cfg), mt, ms, [[1]], [[]])
        assert asm.prefix_lens[0] - 1 - 1 == 64

    def test_generation_seed_state(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        asm = L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2]], [[]])
        assert asm.size == asm.prefix_lens[0] + 1
        assert not asm.loss_mask.any()

    def test_empty_text_rejected(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        with pytest.raises(ContractError):
            L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[]], [[1]])

    def test_ablated_memory_shrinks_prefix(self, rng):
        cfg = LmConfig(d_model=16, n_slots=32, use_mem_t=False)
        m = build_models(cfg, seed=0)
        _, ms = memories(cfg, rng)
        asm = L.assemble(cfg, m.lm, xvec(cfg), None, ms, [[1, 2]], [[3]])
        assert asm.prefix_lens[0] == 1 + 32 + 2

    @pytest.mark.parametrize("scheme", ["absolute", "segment"])
    def test_padded_batch_matches_single(self, rng, scheme):
        cfg = LmConfig(d_model=16, n_heads=4, n_layers=1, n_slots=4, text_vocab=8, speech_vocab=8, pos_scheme=scheme)
        m = build_models(cfg, seed=1)
        mt, ms = memories(cfg, rng, 2)
        texts, speeches = [[1, 2], [3, 4, 5, 6]], [[1, 2, 3, 4], [5]]
        asm = L.assemble(cfg, m.lm, xvec(cfg, 2), mt, ms, texts, speeches)
        logits = L.forward(asm, m.lm).data
        for b in range(2):
            one = L.assemble(cfg, m.lm, xvec(cfg), Tensor(mt.data[b:b + 1]), Tensor(ms.data[b:b + 1]),
                             [texts[b]], [speeches[b]])
            single = L.forward(one, m.lm).data[0]
            np.testing.assert_allclose(logits[b, :one.size], single, rtol=0, atol=1e-12)


class TestForwardAndLoss:
    def test_logit_shape(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        asm = L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]], [[4, 5]])
        assert L.forward(asm, tiny_models.lm).shape == (1, asm.size, tiny_cfg.speech_table_size)

    def test_initial_loss_near_uniform(self, rng):
        cfg = LmConfig(d_model=32, speech_vocab=16)
        m = build_models(cfg, seed=0)
        mt, ms = memories(cfg, rng)
        speech = list(rng.integers(16, size=6))
        asm = L.assemble(cfg, m.lm, xvec(cfg), mt, ms, [[1, 2, 3, 4, 5, 6]], [speech])
        assert abs(L.loss(asm, L.forward(asm, m.lm)).item() - math.log(16)) < 0.5

    def test_text_logits_never_in_loss(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        asm = L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]], [[4, 5]])
        logits = L.forward(asm, tiny_models.lm)
        base = L.loss(asm, logits).item()
        perturbed = logits.data.copy()
        perturbed[0, :asm.prefix_lens[0]] += rng.normal(size=perturbed[0, :asm.prefix_lens[0]].shape) * 10
        assert L.loss(asm, Tensor(perturbed)).item() == base

    def test_prefix_logit_gradient_is_zero(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        asm = L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]], [[4, 5]])
        logits = Tensor(L.forward(asm, tiny_models.lm).data, requires_grad=True)
        L.loss(asm, logits).backward()
        assert np.all(logits.grad[0, :asm.prefix_lens[0]] == 0)
        assert np.all(np.abs(logits.grad[0, asm.prefix_lens[0]:]).sum(axis=-1) > 0)

    def test_overfit_single_sample(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        state = AdamState()
        for _ in range(150):
            asm = L.assemble(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]], [[4, 6, 5]])
            loss = L.loss(asm, L.forward(asm, tiny_models.lm))
            loss.backward()
            adam_step(tiny_models.params, state, lr=1e-2)
        assert loss.item() < 0.01


class TestCausality:
    @pytest.mark.parametrize("mask_kind", ["prefix", "causal"])
    def test_suffix_positions_ignore_future(self, lively, tiny_cfg, rng, mask_kind):
        mt, ms = memories(tiny_cfg, rng)
        speech = [1, 2, 3, 4]
        asm = L.assemble(tiny_cfg, lively.lm, xvec(tiny_cfg), mt, ms, [[5, 6]], [speech])
        base = L.forward(asm, lively.lm, mask_kind).data[0]
        P = asm.prefix_lens[0]
        for k in range(len(speech)):
            changed = list(speech)
            changed[k] = 7
            asm2 = L.assemble(tiny_cfg, lively.lm, xvec(tiny_cfg), mt, ms, [[5, 6]], [changed])
            out = L.forward(asm2, lively.lm, mask_kind).data[0]
            pos = P + 1 + k  # where token k sits (after BOS)
            assert np.all(out[:pos] == base[:pos])
            assert np.abs(out[pos] - base[pos]).max() > 1e-8

    def test_prefix_bidirectionality(self, lively, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        text = [1, 2, 3]
        P = tiny_cfg.prefix_len(len(text))
        mt2 = mt.data.copy()
        mt2[0, -1] += rng.normal(size=tiny_cfg.d_model)
        j = 1 + tiny_cfg.n_slots - 1  # last Mem-T slot
        hidden = {}
        for kind in ("prefix", "causal"):
            a = L.assemble(tiny_cfg, lively.lm, xvec(tiny_cfg), mt, ms, [text], [[4]])
            b = L.assemble(tiny_cfg, lively.lm, xvec(tiny_cfg), Tensor(mt2), ms, [text], [[4]])
            ha = L.forward(a, lively.lm, kind, return_hidden=True)[1].data[0]
            hb = L.forward(b, lively.lm, kind, return_hidden=True)[1].data[0]
            hidden[kind] = np.abs(ha - hb).max(axis=-1)
        assert hidden["prefix"][:j].max() > 1e-8
        assert hidden["causal"][:j].max() < 1e-12
        assert hidden["prefix"][P:].max() > 1e-8


class TestGenerate:
    def test_argmax_is_deterministic(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        a = L.generate(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]],
                       np.random.default_rng(0), temperature=0.0)
        b = L.generate(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]],
                       np.random.default_rng(99), temperature=0.0)
        assert a.tokens == b.tokens

    def test_seeded_sampling_repeats(self, tiny_models, tiny_cfg, rng):
        mt, ms = memories(tiny_cfg, rng)
        runs = [L.generate(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2, 3]],
                           np.random.default_rng(42)).tokens for _ in range(2)]
        assert runs[0] == runs[1]

    def test_cap_and_specials(self, tiny_models, tiny_cfg, rng):
        # forbid EOS outright so the cap has to stop generation
        tiny_models.lm.head.b.data[tiny_cfg.eos_speech] = -1e4
        mt, ms = memories(tiny_cfg, rng)
        gen = L.generate(tiny_cfg, tiny_models.lm, xvec(tiny_cfg), mt, ms, [[1, 2]], np.random.default_rng(1))
        assert gen.hit_cap == [True]
        assert len(gen.tokens[0]) == tiny_cfg.max_generate_factor * 2 + 8
        assert tiny_cfg.bos_speech not in gen.tokens[0] and tiny_cfg.sil_speech not in gen.tokens[0]
