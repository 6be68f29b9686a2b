import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camlm import tensor as T
from camlm.optim import AdamState, ParameterSet, adam_step, grad_check
from camlm.tensor import ContractError, DimensionError, NonFiniteError, Tensor

from conftest import check_grads


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_all(T.mul(out, Tensor(w)))


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_selector(self):
        out = T.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_2d(self, rng):
        err = check_grads(lambda t: weighted_sum(T.matmul(t["a"], t["b"])),
                          {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}, tol=1e-6)
        assert err < 1e-6

    @pytest.mark.parametrize("b_shape", [(4, 2), (2, 4, 2)])
    def test_gradient_batched(self, rng, b_shape):
        check_grads(lambda t: weighted_sum(T.matmul(t["a"], t["b"])),
                    {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=b_shape)})


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert out[0, 0] == 1.0 and out[0, 1] < 1e-300

    def test_masked_entries_exactly_zero(self, rng):
        mask = rng.random((4, 6)) < 0.5
        mask[:, 0] = True
        out = T.softmax_rows(Tensor(rng.normal(size=(4, 6)) * 30), mask).data
        assert np.all(out[~mask] == 0.0)

    def test_gradient(self, rng):
        check_grads(lambda t: weighted_sum(T.softmax_rows(t["m"])), {"m": rng.normal(size=(2, 5))}, tol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, m):
        out = T.softmax_rows(Tensor(m)).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_standardizes(self):
        out = T.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5).data
        assert abs(out.mean()) < 1e-9
        # eps shifts the variance slightly below 1
        assert abs(out.var() - 2 / 3 / (2 / 3 + 1e-5)) < 1e-9

    def test_unit_variance_random_rows(self, rng):
        x = rng.normal(size=(5, 16)) * 3 + 2
        out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-9)
        expected = x.var(axis=-1) / (x.var(axis=-1) + 1e-5)
        np.testing.assert_allclose(out.var(axis=-1), expected, rtol=0, atol=1e-9)

    def test_constant_row(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])

    def test_gradient(self, rng):
        check_grads(lambda t: weighted_sum(T.layer_norm(t["x"], t["g"], t["b"])),
                    {"x": rng.normal(size=(2, 3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)})


class TestActivations:
    def test_sigmoid_zero_is_half(self):
        assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_saturates(self):
        eps = 1.0 - T.sigmoid(Tensor([20.0])).data[0]
        assert 0 < eps < 1e-8
        assert T.sigmoid(Tensor([-800.0])).data[0] >= 0.0

    def test_gelu_gradient(self, rng):
        check_grads(lambda t: weighted_sum(T.gelu(t["x"])), {"x": rng.normal(size=(3, 4)) * 2})

    def test_sigmoid_gradient(self, rng):
        check_grads(lambda t: weighted_sum(T.sigmoid(t["x"])), {"x": rng.normal(size=(6,)) * 3})


class TestEmbedding:
    def test_repeated_rows(self):
        table = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(T.embedding_lookup(table, [0, 0]).data, [[0, 1], [0, 1]])

    def test_empty(self):
        assert T.embedding_lookup(Tensor(np.ones((3, 2))), []).shape == (0, 2)

    def test_out_of_range_names_position(self):
        with pytest.raises(IndexError, match=r"position \(2,\)"):
            T.embedding_lookup(Tensor(np.ones((3, 2))), [0, 1, 3])

    def test_scatter_accumulates(self, rng):
        table = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        g = rng.normal(size=(1, 3))
        T.sum_all(T.mul(T.embedding_lookup(table, [2, 2]), Tensor(np.repeat(g, 2, axis=0)))).backward()
        np.testing.assert_allclose(table.grad[2], 2 * g[0])
        assert np.all(table.grad[[0, 1, 3]] == 0)
        check_grads(lambda t: weighted_sum(T.embedding_lookup(t["w"], [[2, 2, 0], [1, 2, 3]])),
                    {"w": rng.normal(size=(4, 3))})


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.masked_cross_entropy(Tensor(np.zeros((5, 16))), [3] * 5, [True] * 5)
        assert abs(loss.item() - math.log(16)) < 1e-12

    def test_saturated_correct_logit(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 3] = 1000
        assert T.masked_cross_entropy(Tensor(logits), [1, 3], [True, True]).item() < 1e-12

    def test_mask_selects_rows(self, rng):
        logits = rng.normal(size=(5, 6))
        targets = rng.integers(6, size=5)
        mask = np.array([False, True, False, False, True])
        masked = T.masked_cross_entropy(Tensor(logits), targets, mask).item()
        direct = T.masked_cross_entropy(Tensor(logits[mask]), targets[mask], [True, True]).item()
        assert masked == pytest.approx(direct, rel=1e-14)

    def test_all_false_mask_rejected(self):
        with pytest.raises(ContractError):
            T.masked_cross_entropy(Tensor(np.zeros((2, 3))), [0, 0], [False, False])

    def test_gradient_ignores_masked_rows(self, rng):
        mask = np.array([[True, False, True], [False, True, False]])
        targets = rng.integers(5, size=(2, 3))
        err = check_grads(lambda t: T.masked_cross_entropy(t["z"], targets, mask), {"z": rng.normal(size=(2, 3, 5))})
        assert err < 1e-5

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)), st.integers(0, 5))
    def test_nonnegative(self, logits, target):
        assert T.masked_cross_entropy(Tensor(logits), [target] * 4, [True] * 4).item() >= 0


class TestShapeOps:
    def test_heads_round_trip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8)))
        np.testing.assert_array_equal(T.merge_heads(T.split_heads(x, 4), 4).data, x.data)

    def test_concat_and_gather_gradients(self, rng):
        idx = np.array([[0, 2, 2, 4], [1, 1, 3, 0]])
        check_grads(lambda t: weighted_sum(T.gather_rows(T.concat([t["a"], t["b"]], axis=1), idx)),
                    {"a": rng.normal(size=(2, 2, 3)), "b": rng.normal(size=(2, 3, 3))})

    def test_scalar_gate_gradient(self, rng):
        check_grads(lambda t: weighted_sum(T.add(T.mul(t["g"], t["x"]), T.mul(T.one_minus(t["g"]), t["y"]))),
                    {"g": rng.normal(size=1), "x": rng.normal(size=(2, 3)), "y": rng.normal(size=(2, 3))})

    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))


def test_non_finite_output_is_fatal():
    with pytest.raises(NonFiniteError, match="scale"), np.errstate(over="ignore"):
        T.scale(Tensor([1e308]), 10.0)


def test_no_grad_skips_graph(rng):
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with T.no_grad():
        out = T.matmul(w, w)
    assert not out.requires_grad


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        ps = ParameterSet()
        p = ps.add("w", rng.normal(size=(3,)))
        before = p.data.copy()
        adam_step(ps, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_is_lr(self):
        # m1 = 0.1, v1 = 0.001; bias-corrected m/sqrt(v) = 1 / (1 + 1e-8)
        ps = ParameterSet()
        p = ps.add("w", np.zeros(1))
        p.grad[:] = 1.0
        adam_step(ps, AdamState(), lr=0.1)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
        assert p.grad[0] == 0.0

    def test_symmetric_params_stay_equal(self, rng):
        ps = ParameterSet()
        a = ps.add("a", np.full(2, 0.3))
        b = ps.add("b", np.full(2, 0.3))
        state = AdamState()
        for _ in range(25):
            g = rng.normal(size=2)
            a.grad[:] = g
            b.grad[:] = g
            adam_step(ps, state, lr=0.05)
        np.testing.assert_array_equal(a.data, b.data)


def test_grad_check_oracle_detects_wrong_gradient(rng):
    ps = ParameterSet()
    w = ps.add("w", rng.normal(size=(3,)))

    def broken():
        # forward is sum(w^2) but backward pretends it is sum(w)
        out = T._make(np.sum(w.data ** 2), (w,), lambda g: (np.full(3, g),), "broken")
        return out

    assert grad_check(broken, ps)["w"] > 1e-2

    def correct():
        return T.sum_all(T.mul(w, w))

    assert grad_check(correct, ps)["w"] < 1e-7


def test_duplicate_parameter_names_rejected():
    ps = ParameterSet()
    ps.add("x", np.zeros(1))
    with pytest.raises(ContractError):
        ps.add("x", np.zeros(1))
