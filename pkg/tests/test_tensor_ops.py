"""Forward-op contracts: worked examples, error paths, and properties."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqlab import tensor as T
from seqlab.tensor import (
    DomainError,
    ShapeError,
    SingularWeightError,
    Tensor,
)


def seq(values):
    return Tensor(np.asarray(values, dtype=np.float64).reshape(1, 1, -1))


def kernel(taps):
    return Tensor(np.asarray(taps, dtype=np.float64).reshape(1, 1, -1))


ZERO_BIAS = Tensor(np.zeros(1))


class TestConv:
    def test_identity_kernel(self):
        out = T.conv1d_causal(seq([1, 2, 3]), kernel([1]), ZERO_BIAS)
        np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3])

    def test_two_tap_sum(self):
        out = T.conv1d_causal(seq([1, 2, 3]), kernel([1, 1]), ZERO_BIAS, dilation=1)
        np.testing.assert_array_equal(out.data.ravel(), [1, 3, 5])

    def test_dilated_two_tap(self):
        out = T.conv1d_causal(seq([1, 2, 3]), kernel([1, 1]), ZERO_BIAS, dilation=2)
        np.testing.assert_array_equal(out.data.ravel(), [1, 2, 4])

    def test_tap_order_reaches_past(self):
        # tap i multiplies x[t - i]: [10, 1] means out[t] = 10*x[t] + x[t-1]
        out = T.conv1d_causal(seq([1, 2, 3]), kernel([10, 1]), ZERO_BIAS)
        np.testing.assert_array_equal(out.data.ravel(), [10, 21, 32])

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4)))
        w = Tensor(np.zeros((3, 1, 2)))
        with pytest.raises(ShapeError):
            T.conv1d_causal(x, w, Tensor(np.zeros(3)))

    def test_bad_dilation(self):
        with pytest.raises(DomainError):
            T.conv1d_causal(seq([1, 2]), kernel([1]), ZERO_BIAS, dilation=0)

    @given(
        st.integers(1, 4),
        st.integers(1, 3),
        st.integers(1, 12),
        st.integers(0, 11),
        st.integers(0, 10_000),
    )
    def test_causality_prefix_bitwise(self, k, d, t_len, s, rseed):
        s = min(s, t_len - 1)
        rng = np.random.default_rng(rseed)
        x = rng.normal(size=(2, 3, t_len))
        w = Tensor(rng.normal(size=(2, 3, k)))
        b = Tensor(rng.normal(size=2))
        out0 = T.conv1d_causal(Tensor(x), w, b, dilation=d).data
        x2 = x.copy()
        x2[:, :, s] += 1.0
        out1 = T.conv1d_causal(Tensor(x2), w, b, dilation=d).data
        assert np.array_equal(out0[:, :, :s], out1[:, :, :s])
        assert not np.array_equal(out0[:, :, s], out1[:, :, s])

    @given(st.integers(0, 10_000))
    def test_linearity(self, rseed):
        rng = np.random.default_rng(rseed)
        x = rng.normal(size=(2, 2, 8))
        y = rng.normal(size=(2, 2, 8))
        w = Tensor(rng.normal(size=(3, 2, 3)))
        b = Tensor(np.zeros(3))
        alpha, beta = 0.7, -1.3
        mixed = T.conv1d_causal(Tensor(alpha * x + beta * y), w, b, dilation=2).data
        parts = (
            alpha * T.conv1d_causal(Tensor(x), w, b, dilation=2).data
            + beta * T.conv1d_causal(Tensor(y), w, b, dilation=2).data
        )
        np.testing.assert_allclose(mixed, parts, atol=1e-6)


class TestMatmulLinear:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_linear_identity(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = T.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x.data)


class TestElementwise:
    def test_add_zeros(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]).reshape(1, 3))
        out = T.elementwise("add", x, Tensor(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_mul_values(self):
        out = T.elementwise("mul", Tensor([[2.0, 3.0]]), Tensor([[4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[8.0, 15.0]])

    def test_sub_self_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
        np.testing.assert_array_equal(T.elementwise("sub", x, x).data, np.zeros((2, 3)))

    def test_channel_bias_3d(self):
        x = Tensor(np.zeros((2, 3, 4)))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = T.add(x, b)
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out.data[:, 2, :], 3.0)

    def test_non_broadcastable(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2,))))

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            T.elementwise("div", Tensor([1.0]), Tensor([2.0]))


class TestActivations:
    def test_relu(self):
        out = T.activation("relu", Tensor([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_sigmoid_at_zero(self):
        assert T.activation("sigmoid", Tensor(np.zeros(()))).item() == 0.5

    def test_sigmoid_extreme_is_stable(self):
        out = T.sigmoid(Tensor([[-1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-12)

    def test_tanh_gradient_at_zero(self):
        x = T.param(np.zeros(()))
        with T.record() as tape:
            loss = T.tanh(x)
        T.backward(loss, tape)
        assert x.grad == pytest.approx(1.0, abs=1e-12)


class TestLosses:
    def test_mse_self_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
        assert T.mse(x, x).item() == 0.0

    def test_mse_shape_error(self):
        with pytest.raises(ShapeError):
            T.mse(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 2))))

    def test_cross_entropy_uniform_eight(self):
        logits = Tensor(np.zeros((5, 8)))
        loss = T.cross_entropy(logits, np.zeros(5, dtype=np.int64))
        assert loss.item() == pytest.approx(math.log(8), rel=1e-12)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(DomainError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_bernoulli_nll_zero_logits(self):
        rng = np.random.default_rng(1)
        targets = rng.integers(0, 2, size=(2, 88, 7)).astype(np.float64)
        loss = T.bernoulli_nll(Tensor(np.zeros((2, 88, 7))), targets)
        assert loss.item() == pytest.approx(88 * math.log(2), rel=1e-12)

    def test_bernoulli_nll_rejects_nonbinary(self):
        with pytest.raises(DomainError):
            T.bernoulli_nll(Tensor(np.zeros((1, 2, 2))), np.full((1, 2, 2), 0.5))


class TestWeightNorm:
    def test_unit_direction_passthrough(self):
        v = np.zeros((1, 4))
        v[0, 0] = 1.0
        out = T.weight_norm(Tensor(v), Tensor(np.ones(1)))
        np.testing.assert_allclose(out.data, v)

    @given(st.integers(0, 10_000))
    def test_norm_equals_abs_g(self, rseed):
        rng = np.random.default_rng(rseed)
        v = Tensor(rng.normal(size=(3, 2, 4)) + 0.1)
        g = Tensor(rng.normal(size=3))
        w = T.weight_norm(v, g).data
        norms = np.sqrt((w**2).sum(axis=(1, 2)))
        np.testing.assert_allclose(norms, np.abs(g.data), rtol=1e-9)

    def test_singular_direction_raises(self):
        with pytest.raises(SingularWeightError):
            T.weight_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)))


class TestChannelDropout:
    def test_p_zero_identity(self):
        x = Tensor(np.ones((2, 3, 4)))
        assert T.channel_dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_eval_identity(self):
        x = Tensor(np.ones((2, 3, 4)))
        assert T.channel_dropout(x, 0.5, False) is x

    def test_bad_probability(self):
        with pytest.raises(DomainError):
            T.channel_dropout(Tensor(np.ones((1, 1, 1))), 1.0, True)

    def test_zeroes_whole_channels(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.ones((4, 8, 6)))
        out = T.channel_dropout(x, 0.5, True, rng).data
        # each (batch, channel) is either fully zero or fully scaled
        per_channel = out.reshape(32, 6)
        assert all(len(np.unique(row)) == 1 for row in per_channel)

    def test_expectation_preserved(self):
        rng = np.random.default_rng(0)
        x = np.full((20_000, 5, 3), 2.0, dtype=np.float64)
        out = T.channel_dropout(Tensor(x), 0.3, True, rng).data
        np.testing.assert_allclose(out.mean(axis=0), 2.0, rtol=0.02)


class TestClip:
    def test_below_threshold_untouched(self):
        p = T.param(np.zeros(2))
        p.grad = np.array([0.3, 0.4])
        assert T.clip_grad_global_norm([p], 1.0) == 1.0
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])

    def test_rescale(self):
        p = T.param(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        scale = T.clip_grad_global_norm([p], 1.0)
        assert scale == pytest.approx(0.2)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    @given(st.integers(0, 10_000), st.floats(0.1, 5.0))
    def test_postclip_norm(self, rseed, max_norm):
        rng = np.random.default_rng(rseed)
        ps = []
        for shape in ((3,), (2, 2)):
            p = T.param(np.zeros(shape))
            p.grad = rng.normal(size=shape)
            ps.append(p)
        before = math.sqrt(sum(float((p.grad**2).sum()) for p in ps))
        T.clip_grad_global_norm(ps, max_norm)
        after = math.sqrt(sum(float((p.grad**2).sum()) for p in ps))
        assert after == pytest.approx(min(before, max_norm), abs=1e-6)


class TestLookupAndSlicing:
    def test_select_last_step(self):
        x = Tensor(np.arange(6.0).reshape(1, 2, 3))
        np.testing.assert_array_equal(T.select_last_step(x).data, [[2.0, 5.0]])

    def test_select_step_out_of_range(self):
        with pytest.raises(DomainError):
            T.select_step(Tensor(np.zeros((1, 1, 3))), 3)

    def test_embedding_out_of_vocab(self):
        with pytest.raises(DomainError):
            T.embedding(np.array([[0, 5]]), Tensor(np.zeros((3, 2))))

    @given(st.integers(0, 10_000))
    def test_embedding_matches_onehot_matmul(self, rseed):
        rng = np.random.default_rng(rseed)
        table = rng.normal(size=(7, 4))
        tok = rng.integers(0, 7, size=(2, 5))
        emb = T.embedding(tok, Tensor(table)).data
        onehot = np.eye(7)[tok]  # [2, 5, 7]
        expected = (onehot @ table).transpose(0, 2, 1)
        np.testing.assert_allclose(emb, expected)

    def test_stack_time_roundtrip(self):
        rng = np.random.default_rng(0)
        steps = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
        out = T.stack_time(steps)
        for j, s in enumerate(steps):
            np.testing.assert_array_equal(out.data[:, :, j], s.data)
