"""Temporal blocks, conv stacks, recurrent cells, heads, param counting."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqlab import nn
from seqlab import tensor as T
from seqlab.tensor import Tensor
from seqlab.verify import fd_gradcheck


def make_block_params(spec: nn.TcnSpec, seed=0, dtype=np.float64):
    return nn.init_tcn_params(spec, np.random.default_rng(seed), dtype=dtype)


def zero_path(params):
    """Silence the conv path: g=0 kills every normalized filter."""
    for name, p in params.items():
        if name.endswith(".g") or name.endswith(".b"):
            p.data[...] = 0.0
        if name.endswith("down.w") or name.endswith("down.b"):
            p.data[...] = 0.0


class TestReceptiveField:
    def test_pointwise_kernel(self):
        for n in (1, 3, 5):
            assert nn.receptive_field(1, n) == 1

    def test_small_stack(self):
        assert nn.receptive_field(3, 2) == 13

    def test_copy_scale_config(self):
        assert nn.receptive_field(8, 8) == 3571
        assert nn.receptive_field(8, 8) >= 1020

    def test_invalid(self):
        with pytest.raises(ValueError):
            nn.receptive_field(0, 1)

    def test_matches_perturbation_sweep(self):
        # positive weights keep every path alive through the ReLUs
        rng = np.random.default_rng(5)
        spec = nn.TcnSpec(in_channels=2, level_channels=(3, 3), kernel_size=3)
        params = make_block_params(spec, seed=5)
        for name, p in params.items():
            if name.endswith(".v") or name.endswith(".w"):
                p.data = np.abs(rng.normal(size=p.shape)) + 0.1
            if name.endswith(".g"):
                v = params[name[: -len(".g")] + ".v"].data
                p.data = np.sqrt((v**2).sum(axis=tuple(range(1, v.ndim))))
            if name.endswith(".b"):
                p.data[...] = 0.1
        rf = nn.receptive_field(3, 2)
        t_len = rf + 5
        x = rng.random((1, 2, t_len)) + 0.5
        base = nn.tcn_forward(Tensor(x), spec, params).data
        s = 1
        x2 = x.copy()
        x2[:, :, s] += 1.0
        out = nn.tcn_forward(Tensor(x2), spec, params).data
        changed = [
            t for t in range(t_len) if not np.array_equal(base[:, :, t], out[:, :, t])
        ]
        assert changed == list(range(s, s + rf))


class TestTemporalBlock:
    def test_silenced_path_reduces_to_relu(self):
        spec = nn.TcnSpec(in_channels=3, level_channels=(3,), kernel_size=3)
        params = make_block_params(spec)
        zero_path(params)
        x = np.random.default_rng(0).normal(size=(2, 3, 6))
        out = nn.temporal_block_forward(Tensor(x), params, 0, 1, 0.0, False)
        np.testing.assert_allclose(out.data, np.maximum(x, 0.0), atol=1e-12)

    def test_block_receptive_field(self):
        # single block: 1 + 2*(k-1)*d positions can change
        rng = np.random.default_rng(1)
        k, d = 3, 4
        spec = nn.TcnSpec(in_channels=2, level_channels=(2,), kernel_size=k)
        params = make_block_params(spec, seed=1)
        for name, p in params.items():
            if name.endswith(".v") or name.endswith(".w"):
                p.data = np.abs(rng.normal(size=p.shape)) + 0.1
            if name.endswith(".g"):
                v = params[name[: -len(".g")] + ".v"].data
                p.data = np.sqrt((v**2).sum(axis=tuple(range(1, v.ndim))))
            if name.endswith(".b"):
                p.data[...] = 0.1
        rf = 1 + 2 * (k - 1) * d
        t_len = rf + 4
        x = rng.random((1, 2, t_len)) + 0.5
        base = nn.temporal_block_forward(Tensor(x), params, 0, d, 0.0, False).data
        x2 = x.copy()
        x2[:, :, 0] += 1.0
        out = nn.temporal_block_forward(Tensor(x2), params, 0, d, 0.0, False).data
        changed = [
            t for t in range(t_len) if not np.array_equal(base[:, :, t], out[:, :, t])
        ]
        # a lone block at dilation d only reaches multiples of d; the span
        # of its influence is exactly 1 + 2*(k-1)*d
        assert changed == [d * i for i in range(2 * (k - 1) + 1)]
        assert changed[-1] - changed[0] + 1 == rf

    def test_no_residual_is_plain_path(self):
        spec = nn.TcnSpec(
            in_channels=2, level_channels=(4,), kernel_size=3, use_residual=False
        )
        params = make_block_params(spec)
        assert "block0.down.w" not in params
        x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 5)))
        out = nn.temporal_block_forward(
            Tensor(x.data), params, 0, 1, 0.0, False, use_residual=False
        )
        # rebuild the two stages by hand
        y = x
        for j in range(2):
            w = T.weight_norm(params[f"block0.conv{j}.v"], params[f"block0.conv{j}.g"])
            y = T.relu(T.conv1d_causal(y, w, params[f"block0.conv{j}.b"], dilation=1))
        np.testing.assert_allclose(out.data, y.data, atol=1e-12)

    def test_causality_property(self):
        spec = nn.TcnSpec(in_channels=2, level_channels=(3,), kernel_size=4)
        params = make_block_params(spec, seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 12))
        base = nn.temporal_block_forward(Tensor(x), params, 0, 2, 0.0, False).data
        x2 = x.copy()
        x2[:, :, 7] += 3.0
        out = nn.temporal_block_forward(Tensor(x2), params, 0, 2, 0.0, False).data
        assert np.array_equal(base[:, :, :7], out[:, :, :7])


class TestGatedBlock:
    def test_neutral_gate(self):
        spec = nn.TcnSpec(
            in_channels=3, level_channels=(3,), kernel_size=2, use_gating=True
        )
        params = make_block_params(spec)
        # zero the gate convs: sigmoid(0) = 0.5 everywhere
        for j in (0, 1):
            params[f"block0.gate{j}.g"].data[...] = 0.0
            params[f"block0.gate{j}.b"].data[...] = 0.0
        x = np.random.default_rng(0).normal(size=(2, 3, 5))
        out = nn.glu_block_forward(Tensor(x), params, 0, 1, 0.0, False)
        # expected: ReLU(x + 0.5*A1(0.5*A0(x)))
        y = Tensor(x)
        for j in (0, 1):
            w = T.weight_norm(params[f"block0.conv{j}.v"], params[f"block0.conv{j}.g"])
            conv = T.conv1d_causal(y, w, params[f"block0.conv{j}.b"], dilation=1)
            y = Tensor(conv.data * 0.5)
        expected = np.maximum(x + y.data, 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_gated_conv_params_double(self):
        base = nn.TcnSpec(in_channels=4, level_channels=(6, 6), kernel_size=3)
        gated = nn.TcnSpec(
            in_channels=4, level_channels=(6, 6), kernel_size=3, use_gating=True
        )
        pb = make_block_params(base)
        pg = make_block_params(gated)

        def conv_params(params):
            return sum(
                p.size
                for name, p in params.items()
                if ".conv" in name or ".gate" in name
            )

        assert conv_params(pg) == 2 * conv_params(pb)

    def test_gated_causality(self):
        spec = nn.TcnSpec(
            in_channels=2, level_channels=(3, 3), kernel_size=3, use_gating=True
        )
        params = make_block_params(spec, seed=9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 20))
        base = nn.tcn_forward(Tensor(x), spec, params).data
        x2 = x.copy()
        x2[:, :, 11] += 2.0
        out = nn.tcn_forward(Tensor(x2), spec, params).data
        assert np.array_equal(base[:, :, :11], out[:, :, :11])


class TestTcnStack:
    def test_single_level_equals_block(self):
        spec = nn.TcnSpec(in_channels=2, level_channels=(4,), kernel_size=3)
        params = make_block_params(spec, seed=6)
        x = Tensor(np.random.default_rng(7).normal(size=(2, 2, 9)))
        a = nn.tcn_forward(Tensor(x.data), spec, params).data
        b = nn.temporal_block_forward(Tensor(x.data), params, 0, 1, 0.0, False).data
        np.testing.assert_array_equal(a, b)

    @given(st.integers(1, 9), st.integers(0, 1000))
    def test_output_length_matches_input(self, t_len, rseed):
        spec = nn.TcnSpec(in_channels=2, level_channels=(3, 3), kernel_size=3)
        params = make_block_params(spec, seed=8)
        x = Tensor(np.random.default_rng(rseed).normal(size=(1, 2, t_len)))
        out = nn.tcn_forward(x, spec, params)
        assert out.shape == (1, 3, t_len)

    def test_dilations_grow_exponentially(self):
        spec = nn.TcnSpec(in_channels=1, level_channels=(2, 2, 2, 2), kernel_size=2)
        assert spec.dilations() == [1, 2, 4, 8]


class TestRnnCells:
    def test_lstm_zero_weights_keeps_zero_state(self):
        spec = nn.RnnSpec("lstm", in_channels=2, hidden_size=3, forget_gate_bias=0.0)
        params = nn.init_rnn_params(spec, np.random.default_rng(0), dtype=np.float64)
        for p in params.values():
            p.data[...] = 0.0
        h = Tensor(np.zeros((1, 3)))
        c = Tensor(np.zeros((1, 3)))
        x_t = Tensor(np.ones((1, 2)))
        out, (h2, c2) = nn.rnn_cell_step("lstm", x_t, (h, c), params)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))
        np.testing.assert_array_equal(c2.data, np.zeros((1, 3)))

    def test_gru_saturated_update_gate_freezes_state(self):
        spec = nn.RnnSpec("gru", in_channels=2, hidden_size=3)
        params = nn.init_rnn_params(spec, np.random.default_rng(1), dtype=np.float64)
        params["layer0.b_x"].data[3:6] = 30.0  # update-gate slice
        h0 = np.random.default_rng(2).normal(size=(1, 3))
        out, (h1,) = nn.rnn_cell_step(
            "gru", Tensor(np.ones((1, 2))), (Tensor(h0.copy()),), params
        )
        np.testing.assert_allclose(h1.data, h0, atol=1e-8)

    def test_unrolled_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        spec = nn.RnnSpec("lstm", in_channels=2, hidden_size=3)
        params = nn.init_rnn_params(spec, rng, dtype=np.float64)
        for p in params.values():
            p.data = rng.normal(size=p.shape) * 0.6
        x = T.param(rng.normal(size=(2, 2, 5)))
        target = Tensor(rng.normal(size=(2, 3)))
        leaves = dict(params)
        leaves["x"] = x

        def loss():
            h = nn.rnn_forward(x, spec, params)
            return T.mse(h, target)

        assert fd_gradcheck(loss, leaves) < 1e-4

    def test_unknown_cell(self):
        with pytest.raises(ValueError):
            nn.RnnSpec("elman", 1, 1)


class TestHeadsAndCounts:
    def test_select_last_step_head(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]]))
        np.testing.assert_array_equal(T.select_last_step(x).data, [[3.0, 6.0]])

    def test_linear_param_count(self):
        params = {
            "w": T.param(np.zeros((10, 10))),
            "b": T.param(np.zeros(10)),
        }
        assert nn.param_count(params) == 110

    def test_count_is_seed_independent(self):
        spec = nn.TcnSpec(in_channels=2, level_channels=(5, 5), kernel_size=4)
        c = [
            nn.param_count(nn.init_tcn_params(spec, np.random.default_rng(s)))
            for s in (0, 1, 2)
        ]
        assert c[0] == c[1] == c[2]

    def test_sequence_model_last_step_shapes(self):
        spec = nn.TcnSpec(in_channels=2, level_channels=(4, 4), kernel_size=3)
        model = nn.SequenceModel(
            spec, nn.HeadSpec("last_step", 3), rng=np.random.default_rng(0)
        )
        out = model.forward(np.zeros((5, 2, 7), dtype=np.float32))
        assert out.shape == (5, 3)

    def test_sequence_model_tokens_per_step(self):
        spec = nn.TcnSpec(in_channels=6, level_channels=(4,), kernel_size=2)
        model = nn.SequenceModel(
            spec,
            nn.HeadSpec("per_step", 9),
            vocab_size=9,
            embed_dim=6,
            rng=np.random.default_rng(0),
        )
        out = model.forward(np.zeros((3, 11), dtype=np.int64))
        assert out.shape == (3, 9, 11)

    def test_sequence_model_onehot_matches_vocab_channels(self):
        spec = nn.RnnSpec("lstm", in_channels=9, hidden_size=5)
        model = nn.SequenceModel(
            spec,
            nn.HeadSpec("per_step", 9),
            vocab_size=9,
            onehot_input=True,
            rng=np.random.default_rng(0),
        )
        assert "embed.table" not in model.params
        out = model.forward(np.zeros((2, 6), dtype=np.int64))
        assert out.shape == (2, 9, 6)
