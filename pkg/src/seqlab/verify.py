"""Property suites: finite-difference gradient checks, causality probes,
and Monte-Carlo baseline cross-checks.

These back the ``verify`` CLI subcommand and the test suite. Gradient
checks run in float64 so central differences have headroom; the causality
probe demands *bitwise* equality outside the influence region, which the
convolution guarantees because it never mixes time positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn, tasks
from . import tensor as T
from .tensor import Tensor

GRADCHECK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def fd_gradcheck(
    build_loss: Callable[[], Tensor],
    leaves: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``build_loss`` must rebuild the scalar loss from the leaves' current
    data on every call (stochastic pieces must be frozen or re-seeded).
    """
    for p in leaves.values():
        p.grad = None
    with T.record() as tape:
        loss = build_loss()
    T.backward(loss, tape)
    worst = 0.0
    for p in leaves.values():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build_loss().item()
            flat[i] = orig - eps
            f_minus = build_loss().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(gflat[i]) - central) / max(1.0, abs(central))
            worst = max(worst, rel)
    return worst


def _weighted_scalar(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random linear functional making non-scalar outputs checkable."""
    return T.sum_all(T.mul(out, Tensor(weights)))


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    f64 = np.float64

    def randn(*shape):
        return rng.normal(size=shape).astype(f64)

    checks: list[tuple[str, Callable[[], float]]] = []

    def check_conv(k, d, name):
        x = T.param(randn(2, 3, 9))
        w = T.param(randn(4, 3, k))
        b = T.param(randn(4))
        c = randn(2, 4, 9)

        def loss():
            return _weighted_scalar(T.conv1d_causal(x, w, b, dilation=d), c)

        return name, lambda: fd_gradcheck(loss, {"x": x, "w": w, "b": b})

    checks.append(check_conv(3, 1, "conv1d_causal k3 d1"))
    checks.append(check_conv(3, 2, "conv1d_causal k3 d2"))
    checks.append(check_conv(1, 1, "conv1d_causal k1"))

    def check_matmul():
        a, b = T.param(randn(3, 4)), T.param(randn(4, 2))
        c = randn(3, 2)

        def loss():
            return _weighted_scalar(T.matmul(a, b), c)

        return fd_gradcheck(loss, {"a": a, "b": b})

    checks.append(("matmul", check_matmul))

    def check_linear():
        x, w, b = T.param(randn(5, 3)), T.param(randn(4, 3)), T.param(randn(4))
        c = randn(5, 4)

        def loss():
            return _weighted_scalar(T.linear(x, w, b), c)

        return fd_gradcheck(loss, {"x": x, "w": w, "b": b})

    checks.append(("linear", check_linear))

    for kind in ("add", "sub", "mul"):
        def check_ew(kind=kind):
            a, b = T.param(randn(3, 5)), T.param(randn(3, 5))
            c = randn(3, 5)

            def loss():
                return _weighted_scalar(T.elementwise(kind, a, b), c)

            return fd_gradcheck(loss, {"a": a, "b": b})

        checks.append((f"elementwise {kind}", check_ew))

        def check_ew_channel(kind=kind):
            a, b = T.param(randn(2, 4, 6)), T.param(randn(4))
            c = randn(2, 4, 6)

            def loss():
                return _weighted_scalar(T.elementwise(kind, a, b), c)

            return fd_gradcheck(loss, {"a": a, "b": b})

        checks.append((f"elementwise {kind} per-channel", check_ew_channel))

    def check_act(kind):
        # keep inputs away from the ReLU kink so differences stay two-sided
        base = rng.normal(size=(3, 7))
        base = np.where(np.abs(base) < 0.2, base + 0.5, base).astype(f64)
        x = T.param(base)
        c = randn(3, 7)

        def loss():
            return _weighted_scalar(T.activation(kind, x), c)

        return lambda: fd_gradcheck(loss, {"x": x})

    for kind in ("relu", "sigmoid", "tanh"):
        checks.append((f"activation {kind}", check_act(kind)))

    def check_weight_norm():
        v, g = T.param(randn(4, 3, 2)), T.param(randn(4))
        c = randn(4, 3, 2)

        def loss():
            return _weighted_scalar(T.weight_norm(v, g), c)

        return fd_gradcheck(loss, {"v": v, "g": g})

    checks.append(("weight_norm", check_weight_norm))

    def check_dropout():
        x = T.param(randn(3, 4, 5))
        c = randn(3, 4, 5)

        def loss():
            drop_rng = np.random.default_rng(77)
            return _weighted_scalar(T.channel_dropout(x, 0.4, True, drop_rng), c)

        return fd_gradcheck(loss, {"x": x})

    checks.append(("channel_dropout (frozen mask)", check_dropout))

    def check_embedding():
        table = T.param(randn(6, 3))
        tok = rng.integers(0, 6, size=(2, 5))
        c = randn(2, 3, 5)

        def loss():
            return _weighted_scalar(T.embedding(tok, table), c)

        return fd_gradcheck(loss, {"table": table})

    checks.append(("embedding", check_embedding))

    def check_slicing():
        x = T.param(randn(2, 4, 6))
        y = T.param(randn(3, 8))
        c1, c2 = randn(2, 4), randn(3, 3)

        def loss():
            a = _weighted_scalar(T.select_step(x, 2), c1)
            b = _weighted_scalar(T.slice_cols(y, 2, 5), c2)
            return T.add(a, b)

        return fd_gradcheck(loss, {"x": x, "y": y})

    checks.append(("select_step / slice_cols", check_slicing))

    def check_stack():
        steps = [T.param(randn(2, 3)) for _ in range(4)]
        c = randn(2, 3, 4)

        def loss():
            return _weighted_scalar(T.stack_time(steps), c)

        return fd_gradcheck(loss, {f"s{i}": s for i, s in enumerate(steps)})

    checks.append(("stack_time", check_stack))

    def check_mse():
        p, t = T.param(randn(4, 3)), T.param(randn(4, 3))

        def loss():
            return T.mse(p, t)

        return fd_gradcheck(loss, {"pred": p, "target": t})

    checks.append(("mse", check_mse))

    def check_ce2d():
        logits = T.param(randn(6, 5))
        labels = rng.integers(0, 5, size=6)

        def loss():
            return T.cross_entropy(logits, labels)

        return fd_gradcheck(loss, {"logits": logits})

    checks.append(("cross_entropy 2d", check_ce2d))

    def check_ce3d():
        logits = T.param(randn(2, 5, 4))
        labels = rng.integers(0, 5, size=(2, 4))

        def loss():
            return T.cross_entropy(logits, labels)

        return fd_gradcheck(loss, {"logits": logits})

    checks.append(("cross_entropy per-step", check_ce3d))

    def check_bnll(masked: bool):
        logits = T.param(randn(2, 6, 5))
        targets = rng.integers(0, 2, size=(2, 6, 5)).astype(f64)
        mask = None
        if masked:
            mask = np.zeros((2, 5), dtype=bool)
            mask[:, 1:4] = True

        def loss():
            return T.bernoulli_nll(logits, targets, frame_mask=mask)

        return lambda: fd_gradcheck(loss, {"logits": logits})

    checks.append(("bernoulli_nll", check_bnll(False)))
    checks.append(("bernoulli_nll masked", check_bnll(True)))

    def check_sum():
        x = T.param(randn(3, 4))

        def loss():
            return T.sum_all(T.mul(x, x))

        return fd_gradcheck(loss, {"x": x})

    checks.append(("sum_all of square", check_sum))

    return checks


def _composite_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    f64 = np.float64
    checks = []

    def tcn_case(name, use_residual, use_gating, dropout):
        spec = nn.TcnSpec(
            in_channels=2,
            level_channels=(4, 5),
            kernel_size=3,
            dropout=dropout,
            use_residual=use_residual,
            use_gating=use_gating,
        )
        params = nn.init_tcn_params(spec, rng, dtype=f64)
        # nudge magnitudes so activations are generic, not near the origin
        for key, p in params.items():
            if key.endswith(".v") or key.endswith(".w"):
                p.data *= 40.0
            if key.endswith(".g"):
                p.data *= 40.0
            if key.endswith(".b"):
                p.data[...] = rng.normal(size=p.shape)
        x = T.param(rng.normal(size=(2, 2, 5)).astype(f64))
        labels = rng.integers(0, 3, size=(2, 5))
        head_w = T.param(rng.normal(size=(3, 5, 1)).astype(f64))
        head_b = T.param(rng.normal(size=3).astype(f64))
        leaves = dict(params)
        leaves["x"] = x
        leaves["head.w"] = head_w
        leaves["head.b"] = head_b

        def loss():
            drop_rng = np.random.default_rng(7)
            feats = nn.tcn_forward(x, spec, params, training=dropout > 0, rng=drop_rng)
            logits = T.conv1d_causal(feats, head_w, head_b)
            return T.cross_entropy(logits, labels)

        return name, lambda: fd_gradcheck(loss, leaves)

    checks.append(tcn_case("composite tcn residual", True, False, 0.0))
    checks.append(tcn_case("composite tcn gated", True, True, 0.0))
    checks.append(tcn_case("composite tcn plain+dropout", False, False, 0.25))

    def rnn_case(kind):
        spec = nn.RnnSpec(cell_kind=kind, in_channels=3, hidden_size=4, num_layers=2,
                          dropout=0.0)
        params = nn.init_rnn_params(spec, rng, dtype=f64)
        for p in params.values():
            p.data = rng.normal(size=p.shape) * 0.7
        x = rng.normal(size=(2, 3, 5)).astype(f64)
        x_t = T.param(x)
        labels = rng.integers(0, 3, size=2)
        head_w = T.param(rng.normal(size=(3, 4)).astype(f64))
        head_b = T.param(rng.normal(size=3).astype(f64))
        leaves = dict(params)
        leaves["x"] = x_t
        leaves["head.w"] = head_w
        leaves["head.b"] = head_b

        def loss():
            h = nn.rnn_forward(x_t, spec, params, training=False)
            logits = T.linear(h, head_w, head_b)
            return T.cross_entropy(logits, labels)

        return f"composite {kind} 5 steps", lambda: fd_gradcheck(loss, leaves)

    for kind in ("lstm", "gru", "vanilla"):
        checks.append(rnn_case(kind))
    return checks


def gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in _op_checks(rng) + _composite_checks(rng):
        err = fn()
        results.append(
            CheckResult(name, err < GRADCHECK_TOL, f"max rel err {err:.3e}")
        )
    return results


# ---------------------------------------------------------------------------
# causality suite
# ---------------------------------------------------------------------------


def _random_tcn(rng: np.random.Generator, k: int, n: int, dtype=np.float64):
    widths = tuple(int(rng.integers(2, 5)) for _ in range(n))
    spec = nn.TcnSpec(in_channels=2, level_channels=widths, kernel_size=k, dropout=0.0)
    params = nn.init_tcn_params(spec, rng, dtype=dtype)
    return spec, params


def causality_suite(seed: int = 0, trials: int = 20) -> list[CheckResult]:
    """Perturbation probes on random conv stacks.

    Past outputs must be bitwise untouched, and positions at or beyond
    the receptive field from the perturbation must also be bitwise
    identical. A positive-path variant checks that the influence region
    really extends to exactly receptive_field - 1.
    """
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        k = int(rng.integers(2, 9))
        n = int(rng.integers(1, 7))
        rf = nn.receptive_field(k, n)
        t_len = rf + 8
        spec, params = _random_tcn(rng, k, n)
        x = rng.normal(size=(1, 2, t_len))
        out0 = nn.tcn_forward(Tensor(x), spec, params).data
        s = 4
        x_pert = x.copy()
        x_pert[:, :, s] += 1.0
        out1 = nn.tcn_forward(Tensor(x_pert), spec, params).data
        past_ok = bool(np.array_equal(out0[:, :, :s], out1[:, :, :s]))
        beyond_ok = bool(np.array_equal(out0[:, :, s + rf :], out1[:, :, s + rf :]))
        results.append(
            CheckResult(
                f"causality k={k} n={n} rf={rf}",
                past_ok and beyond_ok,
                "past exact" if past_ok and beyond_ok else
                f"past_ok={past_ok} beyond_ok={beyond_ok}",
            )
        )
    # edge-of-influence: all-positive paths make the farthest tap visible
    for k, n in ((2, 1), (3, 2), (2, 3)):
        rf = nn.receptive_field(k, n)
        spec = nn.TcnSpec(in_channels=2, level_channels=(3,) * n, kernel_size=k)
        params = nn.init_tcn_params(spec, rng, dtype=np.float64)
        for key, p in params.items():
            if key.endswith(".v") or key.endswith(".w"):
                p.data = np.abs(rng.normal(size=p.shape)) + 0.1
            if key.endswith(".g"):
                v = params[key[:-2] + ".v"].data
                p.data = np.sqrt((v**2).sum(axis=tuple(range(1, v.ndim))))
            if key.endswith(".b"):
                p.data[...] = 0.1
        t_len = rf + 6
        x = rng.random((1, 2, t_len)) + 0.5
        out0 = nn.tcn_forward(Tensor(x), spec, params).data
        s = 2
        x_pert = x.copy()
        x_pert[:, :, s] += 1.0
        out1 = nn.tcn_forward(Tensor(x_pert), spec, params).data
        edge_changed = not np.array_equal(
            out0[:, :, s + rf - 1], out1[:, :, s + rf - 1]
        )
        beyond_same = np.array_equal(out0[:, :, s + rf :], out1[:, :, s + rf :])
        results.append(
            CheckResult(
                f"influence edge k={k} n={n} rf={rf}",
                edge_changed and beyond_same,
                f"changed@rf-1={edge_changed} same@rf={beyond_same}",
            )
        )
    return results


# ---------------------------------------------------------------------------
# baseline suite
# ---------------------------------------------------------------------------


def adding_baseline_mc(n_samples: int = 1_000_000, seed: int = 0, t_len: int = 10) -> float:
    """MSE of the constant predictor 1.0 over freshly sampled batches."""
    total = 0.0
    count = 0
    chunk = 100_000
    for i in range(0, n_samples, chunk):
        m = min(chunk, n_samples - i)
        ds = tasks.gen_adding(m, t_len, rng_seed=seed + i)
        err = 1.0 - ds.targets[:, 0].astype(np.float64)
        total += float((err * err).sum())
        count += m
    return total / count


def copy_baseline_empirical(n_samples: int = 500, t_len: int = 1000, seed: int = 0) -> float:
    """Cross-entropy of the memoryless-optimal predictor on sampled data."""
    ds = tasks.gen_copy_memory(n_samples, t_len, rng_seed=seed)
    total = t_len + 2 * tasks.COPY_PAYLOAD
    logits = np.full((n_samples, tasks.COPY_ALPHABET, total), -1e9, dtype=np.float64)
    logits[:, 0, :] = 0.0  # certain zero before the recall window
    logits[:, 0, -tasks.COPY_PAYLOAD:] = -1e9
    logits[:, 1:9, -tasks.COPY_PAYLOAD:] = 0.0  # uniform guess over 1..8
    loss = T.cross_entropy(Tensor(logits), ds.targets)
    return loss.item()


def random_guess_payload_accuracy(n_samples: int = 2000, t_len: int = 50, seed: int = 0) -> float:
    ds = tasks.gen_copy_memory(n_samples, t_len, rng_seed=seed)
    rng = np.random.default_rng(seed + 1)
    guesses = rng.integers(1, 9, size=ds.targets.shape)
    hits = (guesses == ds.targets)[ds.mask]
    return float(hits.mean())


def baselines_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    mc = adding_baseline_mc(seed=seed)
    target = tasks.ADDING_BASELINE_MSE
    results.append(
        CheckResult(
            "adding constant-1.0 MSE ~ 1/6",
            abs(mc - target) / target < 0.01,
            f"mc {mc:.6f} vs analytic {target:.6f}",
        )
    )
    analytic = tasks.copy_memory_baseline(1000)
    emp = copy_baseline_empirical(seed=seed)
    results.append(
        CheckResult(
            "copy T=1000 memoryless loss ~ 10 ln8/1020",
            abs(emp - analytic) / analytic < 0.01,
            f"empirical {emp:.6f} vs analytic {analytic:.6f}",
        )
    )
    acc = random_guess_payload_accuracy(seed=seed)
    results.append(
        CheckResult(
            "copy random-guess payload accuracy ~ 1/8",
            abs(acc - 0.125) < 0.01,
            f"mc {acc:.4f}",
        )
    )
    return results


SUITES = {
    "gradcheck": gradcheck_suite,
    "causality": causality_suite,
    "baselines": baselines_suite,
}
