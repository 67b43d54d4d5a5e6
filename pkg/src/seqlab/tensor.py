"""Dense tensors with taped reverse-mode differentiation.

The engine covers exactly the operations the sequence models in this
package need: causal dilated 1-D convolution, dense matmul / affine maps,
pointwise arithmetic and activations, weight-normalized filters, channel
dropout, embedding lookup, time-axis slicing and stacking, and the three
training losses. Sequence tensors use the [batch, channels, time] layout
throughout.

Gradients are recorded on an explicit :class:`Tape`. Ops record an entry
only while a tape is active (see :func:`record`), so evaluation code pays
no bookkeeping cost. ``backward(loss, tape)`` replays the tape once, in
reverse recording order, accumulating into ``.grad`` buffers additively.

Precision is whatever dtype the leaf tensors carry: training code uses
float32, gradient checks build float64 graphs for finite-difference
headroom.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """A value lies outside an operation's legal domain."""


class AutodiffError(RuntimeError):
    """Backward was invoked in a way the tape cannot honor."""


class SingularWeightError(ArithmeticError):
    """A weight direction has (near-)zero norm and cannot be normalized."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness assertions (used by the test suite)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if requires_grad and not np.issubdtype(arr.dtype, np.floating):
            raise DomainError("only floating tensors can require gradients")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def param(data: ArrayLike, dtype=None) -> Tensor:
    """Leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True, dtype=dtype)


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Recorded computation graph; entries appear in execution order."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._output_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def _record(self, inputs, output, backward_fn) -> None:
        self.entries.append(_TapeEntry(inputs, output, backward_fn))
        self._output_ids.add(id(output))


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def record() -> Iterator[Tape]:
    """Activate a fresh tape for the enclosed forward pass."""
    tape = Tape()
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def _apply(
    inputs: tuple,
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    if _debug_checks and np.issubdtype(out_data.dtype, np.floating):
        if not np.all(np.isfinite(out_data)):
            raise FloatingPointError("non-finite values produced by a forward op")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape._record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Visits each recorded op exactly once, in reverse recording order.
    Gradients accumulate additively, so parameters used several times
    (or across several backward calls) sum their contributions.
    """
    if loss.shape != ():
        raise AutodiffError("backward requires a scalar loss")
    if tape.entries and id(loss) not in tape._output_ids:
        raise AutodiffError("loss was not produced on this tape")
    loss.grad = np.ones((), dtype=loss.dtype)
    for entry in reversed(tape.entries):
        out_grad = entry.output.grad
        if out_grad is None:
            continue
        grads = entry.backward(out_grad)
        for tensor, grad in zip(entry.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            np.add(tensor.grad, grad, out=tensor.grad, casting="unsafe")


# ---------------------------------------------------------------------------
# pointwise arithmetic (bias-style broadcasting only)
# ---------------------------------------------------------------------------


def _broadcast_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    # per-channel expansion: 1-D b along the channel axis of a 2-D or 3-D a
    if b.ndim == 1 and a.ndim in (2, 3) and b.shape[0] == a.shape[1]:
        return "channel"
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable here")


def _channel_view(data: np.ndarray, a_ndim: int) -> np.ndarray:
    return data.reshape(1, -1) if a_ndim == 2 else data.reshape(1, -1, 1)


def _reduce_channel(grad: np.ndarray, a_ndim: int) -> np.ndarray:
    return grad.sum(axis=0) if a_ndim == 2 else grad.sum(axis=(0, 2))


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_mode(a, b)
    bdata = b.data if mode == "same" else _channel_view(b.data, a.ndim)
    ndim = a.ndim

    def bw(g):
        gb = g if mode == "same" else _reduce_channel(g, ndim)
        return g, gb

    return _apply((a, b), a.data + bdata, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_mode(a, b)
    bdata = b.data if mode == "same" else _channel_view(b.data, a.ndim)
    ndim = a.ndim

    def bw(g):
        gb = -g if mode == "same" else -_reduce_channel(g, ndim)
        return g, gb

    return _apply((a, b), a.data - bdata, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_mode(a, b)
    bdata = b.data if mode == "same" else _channel_view(b.data, a.ndim)
    adata = a.data
    ndim = a.ndim

    def bw(g):
        ga = g * bdata
        gb = g * adata
        if mode == "channel":
            gb = _reduce_channel(gb, ndim)
        return ga, gb

    return _apply((a, b), adata * bdata, bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _apply((x,), np.maximum(x.data, 0), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _apply((x,), out, bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _apply((x,), out, bw)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise DomainError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# dense linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    adata, bdata = a.data, b.data

    def bw(g):
        return g @ bdata.T, adata.T @ g

    return _apply((a, b), adata @ bdata, bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x:[n, in], w:[out, in], b:[out]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes disagree: {x.shape} x {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear bias must be 1-D over output features")
    xdata, wdata = x.data, w.data
    out = xdata @ wdata.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ wdata, g.T @ xdata, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _apply(inputs, out, bw)


# ---------------------------------------------------------------------------
# causal dilated convolution
# ---------------------------------------------------------------------------


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Causal 1-D convolution: out[t] = sum_i w[..., i] * x[t - dilation*i] + b.

    Tap i therefore reaches ``dilation * i`` steps into the past; the
    input is left-padded internally with ``(k-1)*dilation`` zeros so the
    output keeps the input length and never reads the future.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d_causal expects x:[b,c,t] and w:[o,c,k]")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} do not match filter channels {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError("bias must be 1-D over output channels")
    if dilation < 1:
        raise DomainError("dilation must be >= 1")
    batch, c_in, t_len = x.shape
    c_out, _, k = w.shape
    pad = (k - 1) * dilation

    xpad = np.zeros((batch, c_in, t_len + pad), dtype=x.dtype)
    xpad[:, :, pad:] = x.data
    # stack the k shifted views tap-major along the channel axis, then one gemm
    cols = np.concatenate(
        [xpad[:, :, pad - dilation * i : pad - dilation * i + t_len] for i in range(k)],
        axis=1,
    )
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    out = np.matmul(w2, cols)
    out += b.data.reshape(1, c_out, 1)

    def bw(g):
        db = g.sum(axis=(0, 2))
        dw = np.empty_like(w.data)
        for i in range(k):
            lo = pad - dilation * i
            dw[:, :, i] = np.tensordot(g, xpad[:, :, lo : lo + t_len], axes=([0, 2], [0, 2]))
        dcols = np.matmul(w2.T, g)
        dxpad = np.zeros_like(xpad)
        for i in range(k):
            lo = pad - dilation * i
            dxpad[:, :, lo : lo + t_len] += dcols[:, i * c_in : (i + 1) * c_in, :]
        return dxpad[:, :, pad:], dw, db

    return _apply((x, w, b), out, bw)


# ---------------------------------------------------------------------------
# weight normalization and dropout
# ---------------------------------------------------------------------------

_WEIGHT_NORM_EPS = 1e-12


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Reparameterized weight ``g * v / ||v||``, normed per output channel."""
    if v.ndim < 2:
        raise ShapeError("weight_norm expects v with an output-channel axis plus extent")
    if g.shape != (v.shape[0],):
        raise ShapeError("g must be 1-D over output channels")
    axes = tuple(range(1, v.ndim))
    vdata, gdata = v.data, g.data
    norm = np.sqrt((vdata * vdata).sum(axis=axes))
    if np.any(norm < _WEIGHT_NORM_EPS):
        raise SingularWeightError("weight direction has near-zero norm")
    expand = (slice(None),) + (None,) * (v.ndim - 1)
    scale = (gdata / norm)[expand]
    out = vdata * scale

    def bw(gout):
        s = (gout * vdata).sum(axis=axes)
        dg = s / norm
        dv = scale * gout - ((gdata * s / norm**3)[expand]) * vdata
        return dv, dg

    return _apply((v, g), out, bw)


def channel_dropout(
    x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Zero whole (batch, channel) slices across all time steps.

    Survivors are rescaled by 1/(1-p) so the expectation is preserved.
    Identity when ``p == 0`` or not training.
    """
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    if x.ndim != 3:
        raise ShapeError("channel_dropout expects [batch, channels, time]")
    if rng is None:
        raise DomainError("training-mode dropout needs an rng")
    keep = rng.random(x.shape[:2]) >= p
    mask = (keep.astype(x.dtype) / (1.0 - p))[:, :, None]

    def bw(g):
        return (g * mask,)

    return _apply((x,), x.data * mask, bw)


def dropout_mask(
    shape: tuple, p: float, rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """Standalone inverted-dropout mask (used between recurrent layers)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability {p} outside [0, 1)")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


# ---------------------------------------------------------------------------
# lookup / slicing / stacking
# ---------------------------------------------------------------------------


def embedding(tokens, table: Tensor) -> Tensor:
    """Row lookup: tokens [b, t] of ids -> [b, emb, t]."""
    tok = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
    if not np.issubdtype(tok.dtype, np.integer):
        raise DomainError("embedding tokens must be integers")
    if tok.ndim != 2 or table.ndim != 2:
        raise ShapeError("embedding expects tokens [b,t] and table [vocab, emb]")
    vocab = table.shape[0]
    if tok.size and (tok.min() < 0 or tok.max() >= vocab):
        raise DomainError(f"token id outside vocabulary of size {vocab}")
    out = np.ascontiguousarray(table.data[tok].transpose(0, 2, 1))

    def bw(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, tok, np.ascontiguousarray(g.transpose(0, 2, 1)))
        return (dtable,)

    return _apply((table,), out, bw)


def select_step(x: Tensor, index: int) -> Tensor:
    """Pick one time step from [b, c, t] -> [b, c]."""
    if x.ndim != 3:
        raise ShapeError("select_step expects [batch, channels, time]")
    t_len = x.shape[2]
    if not -t_len <= index < t_len:
        raise DomainError(f"time index {index} outside length {t_len}")
    idx = index % t_len
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, :, idx] = g
        return (dx,)

    return _apply((x,), x.data[:, :, idx].copy(), bw)


def select_last_step(x: Tensor) -> Tensor:
    return select_step(x, -1)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column range of a 2-D tensor (used to split fused gate blocks)."""
    if x.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")
    if not 0 <= start < stop <= x.shape[1]:
        raise DomainError(f"column range [{start}, {stop}) invalid for {x.shape}")
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return _apply((x,), x.data[:, start:stop].copy(), bw)


def stack_time(steps: Sequence[Tensor]) -> Tensor:
    """Stack per-step [b, c] tensors into a [b, c, t] sequence."""
    if not steps:
        raise ShapeError("stack_time needs at least one step")
    shape = steps[0].shape
    if any(s.shape != shape or s.ndim != 2 for s in steps):
        raise ShapeError("stack_time steps must share a 2-D shape")
    out = np.stack([s.data for s in steps], axis=2)

    def bw(g):
        return tuple(np.ascontiguousarray(g[:, :, j]) for j in range(len(steps)))

    return _apply(tuple(steps), out, bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return _apply((x,), np.asarray(x.data.sum(), dtype=dtype), bw)


# ---------------------------------------------------------------------------
# losses (scalar mean reductions)
# ---------------------------------------------------------------------------


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes disagree: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bw(g):
        gd = (2.0 / n) * diff * g
        return gd, -gd

    return _apply((pred, target), out, bw)


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if not np.issubdtype(labels.dtype, np.integer):
        raise DomainError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label outside [0, {n_classes})")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with a stable log-sum-exp.

    Accepts logits [n, classes] with labels [n], or per-step logits
    [batch, classes, time] with labels [batch, time]; the mean runs over
    every prediction (batch and time).
    """
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.ndim == 2:
        flat = logits.data
        lab_flat = lab
        if lab_flat.shape != (flat.shape[0],):
            raise ShapeError("labels must be 1-D matching the batch")
    elif logits.ndim == 3:
        if lab.shape != (logits.shape[0], logits.shape[2]):
            raise ShapeError("per-step labels must be [batch, time]")
        flat = np.ascontiguousarray(logits.data.transpose(0, 2, 1)).reshape(
            -1, logits.shape[1]
        )
        lab_flat = lab.reshape(-1)
    else:
        raise ShapeError("cross_entropy expects 2-D or 3-D logits")
    n_classes = flat.shape[1]
    _check_labels(lab_flat, n_classes)

    n = flat.shape[0]
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), lab_flat]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)
    out_shape = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), lab_flat] -= 1.0
        p *= g / n
        if len(out_shape) == 3:
            p = p.reshape(out_shape[0], out_shape[2], out_shape[1]).transpose(0, 2, 1)
            p = np.ascontiguousarray(p)
        return (p,)

    return _apply((logits,), out, bw)


def bernoulli_nll(
    logits: Tensor, targets, frame_mask: Optional[np.ndarray] = None
) -> Tensor:
    """Multi-label NLL for binary frames: summed over channels (keys),
    averaged over (batch, time) frames; masked frames are excluded.
    """
    tar = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if logits.ndim != 3 or tar.shape != logits.shape:
        raise ShapeError("bernoulli_nll expects matching [batch, keys, time] shapes")
    if tar.size and not np.all((tar == 0) | (tar == 1)):
        raise DomainError("bernoulli targets must be 0/1")
    z = logits.data
    # elementwise: max(z,0) - z*t + log(1 + exp(-|z|))
    per_elem = np.maximum(z, 0) - z * tar + np.log1p(np.exp(-np.abs(z)))
    per_frame = per_elem.sum(axis=1)
    if frame_mask is not None:
        if frame_mask.shape != per_frame.shape:
            raise ShapeError("frame_mask must be [batch, time]")
        weight = frame_mask.astype(z.dtype)
        denom = weight.sum()
        if denom == 0:
            raise DomainError("frame_mask excludes every frame")
    else:
        weight = np.ones_like(per_frame)
        denom = per_frame.size
    out = np.asarray((per_frame * weight).sum() / denom, dtype=logits.dtype)

    def bw(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return ((s - tar) * (weight[:, None, :] * (g / denom)),)

    return _apply((logits,), out, bw)


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------


def clip_grad_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping was needed).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total**0.5
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= scale
    return scale
