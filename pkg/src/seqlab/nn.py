"""Model layer: temporal conv blocks/stacks, recurrent cells, heads.

Parameters live in plain insertion-ordered ``dict[str, Tensor]`` maps so
they serialize and count deterministically. Forward functions are pure in
the parameters and record onto whatever tape is active.

A temporal block runs two stages of causal dilated convolution, each
weight-normalized, ReLU-activated and channel-dropped, then adds the
block input back (through a 1x1 projection when widths differ) and
applies a final ReLU. Dropout touches only the convolutional path, never
the skip connection. The gated variant replaces each stage's ReLU with an
elementwise product of two parallel convolutions, one passed through a
sigmoid; the residual wiring is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

# weights are drawn from a zero-mean Gaussian with variance 0.01 (std 0.1);
# far smaller scales fail to break symmetry on the synthetic stress tests
WEIGHT_INIT_STD = 0.1
CONVS_PER_BLOCK = 2  # two conv stages per block, fixed by the architecture

Params = dict[str, Tensor]


@dataclass(frozen=True)
class TcnSpec:
    """Architecture of a dilated causal conv stack.

    Level i runs at dilation ``dilation_base ** i`` and width
    ``level_channels[i]``.
    """

    in_channels: int
    level_channels: tuple[int, ...]
    kernel_size: int
    dropout: float = 0.0
    use_residual: bool = True
    use_gating: bool = False
    dilation_base: int = 2

    def __post_init__(self):
        if self.kernel_size < 1 or len(self.level_channels) < 1:
            raise ValueError("kernel_size and level count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_levels(self) -> int:
        return len(self.level_channels)

    def dilations(self) -> list[int]:
        return [self.dilation_base**i for i in range(self.n_levels)]


@dataclass(frozen=True)
class RnnSpec:
    """Architecture of a stacked recurrent net."""

    cell_kind: str  # lstm | gru | vanilla
    in_channels: int
    hidden_size: int
    num_layers: int = 1
    dropout: float = 0.0
    forget_gate_bias: float = 1.0

    def __post_init__(self):
        if self.cell_kind not in ("lstm", "gru", "vanilla"):
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be >= 1")


def receptive_field(
    k: int, n: int, dilation_base: int = 2, convs_per_block: int = CONVS_PER_BLOCK
) -> int:
    """Span of past inputs that can influence one output position.

    Each conv stage at dilation d reaches (k-1)*d steps back; a stack of n
    blocks with exponentially growing dilation gives
    1 + convs_per_block * (k-1) * sum(base**i for i in range(n)).
    """
    if k < 1 or n < 1:
        raise ValueError("k and n must be >= 1")
    span = sum(dilation_base**i for i in range(n))
    return 1 + convs_per_block * (k - 1) * span


def param_count(params: Params) -> int:
    """Exact number of scalar parameters."""
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _init_conv(
    params: Params, name: str, c_out: int, c_in: int, k: int, rng, dtype
) -> None:
    """Weight-normalized conv filter: v direction, per-channel g, bias."""
    v = rng.normal(0.0, WEIGHT_INIT_STD, size=(c_out, c_in, k)).astype(dtype)
    g = np.sqrt((v.astype(np.float64) ** 2).sum(axis=(1, 2))).astype(dtype)
    params[f"{name}.v"] = T.param(v)
    params[f"{name}.g"] = T.param(g)
    params[f"{name}.b"] = T.param(np.zeros(c_out, dtype=dtype))


def init_tcn_params(spec: TcnSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    c_in = spec.in_channels
    for i, c_out in enumerate(spec.level_channels):
        stage_in = c_in
        for j in range(CONVS_PER_BLOCK):
            _init_conv(params, f"block{i}.conv{j}", c_out, stage_in, spec.kernel_size, rng, dtype)
            if spec.use_gating:
                _init_conv(params, f"block{i}.gate{j}", c_out, stage_in, spec.kernel_size, rng, dtype)
            stage_in = c_out
        if spec.use_residual and c_in != c_out:
            w = rng.normal(0.0, WEIGHT_INIT_STD, size=(c_out, c_in, 1)).astype(dtype)
            params[f"block{i}.down.w"] = T.param(w)
            params[f"block{i}.down.b"] = T.param(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    return params


def init_rnn_params(spec: RnnSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    gates = {"lstm": 4, "gru": 3, "vanilla": 1}[spec.cell_kind]
    c_in = spec.in_channels
    h = spec.hidden_size
    for layer in range(spec.num_layers):
        wx = rng.normal(0.0, WEIGHT_INIT_STD, size=(gates * h, c_in)).astype(dtype)
        wh = rng.normal(0.0, WEIGHT_INIT_STD, size=(gates * h, h)).astype(dtype)
        params[f"layer{layer}.w_x"] = T.param(wx)
        params[f"layer{layer}.w_h"] = T.param(wh)
        if spec.cell_kind == "gru":
            # the candidate term needs its own hidden bias inside the reset gate
            params[f"layer{layer}.b_x"] = T.param(np.zeros(gates * h, dtype=dtype))
            params[f"layer{layer}.b_h"] = T.param(np.zeros(gates * h, dtype=dtype))
        else:
            b = np.zeros(gates * h, dtype=dtype)
            if spec.cell_kind == "lstm":
                b[h : 2 * h] = spec.forget_gate_bias
            params[f"layer{layer}.b"] = T.param(b)
        c_in = h
    return params


# ---------------------------------------------------------------------------
# temporal conv forward
# ---------------------------------------------------------------------------


def _conv_stage(x: Tensor, params: Params, name: str, d: int) -> Tensor:
    w = T.weight_norm(params[f"{name}.v"], params[f"{name}.g"])
    return T.conv1d_causal(x, w, params[f"{name}.b"], dilation=d)


def temporal_block_forward(
    x: Tensor,
    params: Params,
    block: int,
    d: int,
    dropout: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    use_residual: bool = True,
    use_gating: bool = False,
) -> Tensor:
    """One residual block at dilation ``d``; params are read under
    ``block{block}.*``."""
    y = x
    for j in range(CONVS_PER_BLOCK):
        conv = _conv_stage(y, params, f"block{block}.conv{j}", d)
        if use_gating:
            gate = _conv_stage(y, params, f"block{block}.gate{j}", d)
            y = T.mul(conv, T.sigmoid(gate))
        else:
            y = T.relu(conv)
        y = T.channel_dropout(y, dropout, training, rng)
    if not use_residual:
        return y
    down_w = params.get(f"block{block}.down.w")
    if down_w is not None:
        res = T.conv1d_causal(x, down_w, params[f"block{block}.down.b"], dilation=1)
    else:
        res = x
    return T.relu(T.add(y, res))


def glu_block_forward(
    x: Tensor,
    params: Params,
    block: int,
    d: int,
    dropout: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    use_residual: bool = True,
) -> Tensor:
    return temporal_block_forward(
        x, params, block, d, dropout, training, rng, use_residual, use_gating=True
    )


def tcn_forward(
    x: Tensor,
    spec: TcnSpec,
    params: Params,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    y = x
    for i, d in enumerate(spec.dilations()):
        y = temporal_block_forward(
            y,
            params,
            i,
            d,
            spec.dropout,
            training,
            rng,
            use_residual=spec.use_residual,
            use_gating=spec.use_gating,
        )
    return y


# ---------------------------------------------------------------------------
# recurrent forward
# ---------------------------------------------------------------------------


def rnn_cell_step(kind: str, x_t: Tensor, state: tuple, params: Params, layer: int = 0):
    """Advance one recurrent cell a single time step.

    state is (h,) for gru/vanilla and (h, c) for lstm; returns
    (output, new_state) where output is the new hidden h.
    """
    prefix = f"layer{layer}"
    h = state[0]
    hidden = h.shape[1]
    if kind == "lstm":
        pre = T.add(
            T.linear(x_t, params[f"{prefix}.w_x"], params[f"{prefix}.b"]),
            T.linear(h, params[f"{prefix}.w_h"]),
        )
        i = T.sigmoid(T.slice_cols(pre, 0, hidden))
        f = T.sigmoid(T.slice_cols(pre, hidden, 2 * hidden))
        g = T.tanh(T.slice_cols(pre, 2 * hidden, 3 * hidden))
        o = T.sigmoid(T.slice_cols(pre, 3 * hidden, 4 * hidden))
        c_new = T.add(T.mul(f, state[1]), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        return h_new, (h_new, c_new)
    if kind == "gru":
        px = T.linear(x_t, params[f"{prefix}.w_x"], params[f"{prefix}.b_x"])
        ph = T.linear(h, params[f"{prefix}.w_h"], params[f"{prefix}.b_h"])
        r = T.sigmoid(T.add(T.slice_cols(px, 0, hidden), T.slice_cols(ph, 0, hidden)))
        z = T.sigmoid(
            T.add(
                T.slice_cols(px, hidden, 2 * hidden),
                T.slice_cols(ph, hidden, 2 * hidden),
            )
        )
        n = T.tanh(
            T.add(
                T.slice_cols(px, 2 * hidden, 3 * hidden),
                T.mul(r, T.slice_cols(ph, 2 * hidden, 3 * hidden)),
            )
        )
        # update gate at 1 keeps the previous state unchanged
        one = Tensor(np.ones_like(z.data))
        h_new = T.add(T.mul(T.sub(one, z), n), T.mul(z, h))
        return h_new, (h_new,)
    if kind == "vanilla":
        pre = T.add(
            T.linear(x_t, params[f"{prefix}.w_x"], params[f"{prefix}.b"]),
            T.linear(h, params[f"{prefix}.w_h"]),
        )
        h_new = T.tanh(pre)
        return h_new, (h_new,)
    raise ValueError(f"unknown cell kind {kind!r}")


def _zero_state(kind: str, batch: int, hidden: int, dtype) -> tuple:
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    if kind == "lstm":
        return (h, Tensor(np.zeros((batch, hidden), dtype=dtype)))
    return (h,)


def rnn_forward(
    x,
    spec: RnnSpec,
    params: Params,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    need_all_steps: bool = False,
):
    """Run the stacked recurrence over a whole sequence.

    ``x`` is either a raw float array [b, c, t] (sliced outside the tape)
    or a Tensor [b, c, t] (e.g. embedded tokens, sliced on the tape).
    Returns [b, h, t] when ``need_all_steps`` else the final hidden [b, h].
    Inter-layer dropout uses one feature mask per sequence, held fixed
    across time steps.
    """
    is_tensor = isinstance(x, Tensor)
    batch, _, t_len = x.shape
    dtype = x.dtype
    states = [
        _zero_state(spec.cell_kind, batch, spec.hidden_size, dtype)
        for _ in range(spec.num_layers)
    ]
    masks = []
    if training and spec.dropout > 0.0 and spec.num_layers > 1:
        if rng is None:
            raise T.DomainError("training-mode dropout needs an rng")
        masks = [
            Tensor(T.dropout_mask((batch, spec.hidden_size), spec.dropout, rng, dtype))
            for _ in range(spec.num_layers - 1)
        ]
    outputs = []
    for t in range(t_len):
        if is_tensor:
            inp = T.select_step(x, t)
        else:
            inp = Tensor(np.ascontiguousarray(x[:, :, t]))
        for layer in range(spec.num_layers):
            out, states[layer] = rnn_cell_step(
                spec.cell_kind, inp, states[layer], params, layer
            )
            if layer < spec.num_layers - 1 and masks:
                out = T.mul(out, masks[layer])
            inp = out
        if need_all_steps:
            outputs.append(inp)
    if need_all_steps:
        return T.stack_time(outputs)
    return inp


# ---------------------------------------------------------------------------
# full model: embedding + encoder + head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadSpec:
    mode: str  # last_step | per_step
    out_dim: int


class SequenceModel:
    """Encoder (conv stack or recurrence) with input embedding and output head."""

    def __init__(
        self,
        encoder_spec,
        head: HeadSpec,
        vocab_size: Optional[int] = None,
        embed_dim: Optional[int] = None,
        onehot_input: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if head.mode not in ("last_step", "per_step"):
            raise ValueError(f"unknown head mode {head.mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder_spec = encoder_spec
        self.head = head
        self.vocab_size = vocab_size
        self.onehot_input = onehot_input
        self.dtype = dtype
        self.params: Params = {}
        if vocab_size is not None and not onehot_input:
            if embed_dim is None:
                raise ValueError("token input needs an embed_dim")
            table = rng.normal(0.0, WEIGHT_INIT_STD, size=(vocab_size, embed_dim)).astype(dtype)
            self.params["embed.table"] = T.param(table)
        if isinstance(encoder_spec, TcnSpec):
            self.params.update(init_tcn_params(encoder_spec, rng, dtype))
            feat = encoder_spec.level_channels[-1]
        elif isinstance(encoder_spec, RnnSpec):
            self.params.update(init_rnn_params(encoder_spec, rng, dtype))
            feat = encoder_spec.hidden_size
        else:
            raise TypeError(f"unsupported encoder spec {type(encoder_spec)!r}")
        if head.mode == "per_step":
            w = rng.normal(0.0, WEIGHT_INIT_STD, size=(head.out_dim, feat, 1)).astype(dtype)
        else:
            w = rng.normal(0.0, WEIGHT_INIT_STD, size=(head.out_dim, feat)).astype(dtype)
        self.params["head.w"] = T.param(w)
        self.params["head.b"] = T.param(np.zeros(head.out_dim, dtype=dtype))

    def param_count(self) -> int:
        return param_count(self.params)

    def forward(
        self,
        inputs: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Map a batch of inputs to logits/predictions.

        Token tasks pass an int array [b, t]; real-valued tasks pass
        [b, c, t]. Output is [b, out] for a last-step head and
        [b, out, t] for a per-step head.
        """
        if self.vocab_size is not None and self.onehot_input:
            tok = np.asarray(inputs)
            eye = np.eye(self.vocab_size, dtype=self.dtype)
            x = Tensor(np.ascontiguousarray(eye[tok].transpose(0, 2, 1)))
        elif self.vocab_size is not None:
            x = T.embedding(inputs, self.params["embed.table"])
        else:
            x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=self.dtype))
        if isinstance(self.encoder_spec, TcnSpec):
            feats = tcn_forward(x, self.encoder_spec, self.params, training, rng)
        else:
            if self.vocab_size is None and isinstance(x, Tensor) and not x.requires_grad:
                feats = rnn_forward(
                    x.data, self.encoder_spec, self.params, training, rng,
                    need_all_steps=self.head.mode == "per_step",
                )
            else:
                feats = rnn_forward(
                    x, self.encoder_spec, self.params, training, rng,
                    need_all_steps=self.head.mode == "per_step",
                )
        if self.head.mode == "last_step":
            if feats.ndim == 3:
                feats = T.select_last_step(feats)
            return T.linear(feats, self.params["head.w"], self.params["head.b"])
        if feats.ndim == 2:
            raise T.ShapeError("per-step head needs per-step features")
        return T.conv1d_causal(feats, self.params["head.w"], self.params["head.b"])
