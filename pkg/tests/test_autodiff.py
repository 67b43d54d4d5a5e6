"""Tape mechanics and gradient correctness against finite differences."""

import numpy as np
import pytest

from seqlab import tensor as T
from seqlab.tensor import AutodiffError, Tensor
from seqlab.verify import fd_gradcheck


def test_sum_gradient_is_ones():
    x = T.param(np.array([1.0, 2.0, 3.0]))
    with T.record() as tape:
        loss = T.sum_all(x)
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_square_sum_gradient():
    x = T.param(np.array([1.0, -2.0, 3.0]))
    with T.record() as tape:
        loss = T.sum_all(T.mul(x, x))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_grads_accumulate_across_uses():
    x = T.param(np.array([2.0]))
    with T.record() as tape:
        loss = T.sum_all(T.add(x, x))
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_grads_accumulate_across_backward_calls():
    x = T.param(np.array([1.0, 1.0]))
    for _ in range(2):
        with T.record() as tape:
            loss = T.sum_all(x)
        T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    x = T.param(np.ones(3))
    with T.record() as tape:
        y = T.add(x, x)
    with pytest.raises(AutodiffError):
        T.backward(y, tape)


def test_backward_rejects_foreign_loss():
    x = T.param(np.ones(3))
    with T.record() as tape:
        T.sum_all(x)
    with T.record() as other:
        stray = T.sum_all(T.param(np.ones(2)))
    with pytest.raises(AutodiffError):
        T.backward(stray, tape)


def test_no_recording_without_tape():
    x = T.param(np.ones(3))
    out = T.relu(x)
    assert not out.requires_grad


def test_constants_get_no_grad():
    x = T.param(np.ones(2))
    c = Tensor(np.ones(2))
    with T.record() as tape:
        loss = T.sum_all(T.mul(x, c))
    T.backward(loss, tape)
    assert c.grad is None
    assert x.grad is not None


def test_matmul_grad_of_total_sum():
    # d/dA sum(A @ B) broadcasts the row sums of B
    rng = np.random.default_rng(0)
    a = T.param(rng.normal(size=(3, 4)))
    b = T.param(rng.normal(size=(4, 2)))
    with T.record() as tape:
        loss = T.sum_all(T.matmul(a, b))
    T.backward(loss, tape)
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)

    def loss_fn():
        return T.sum_all(T.matmul(a, b))

    assert fd_gradcheck(loss_fn, {"a": a, "b": b}) < 1e-6


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = T.param(rng.normal(size=(3, 4)))
    w = T.param(rng.normal(size=(5, 4)))
    b = T.param(rng.normal(size=5))

    def loss_fn():
        h = T.tanh(T.linear(x, w, b))
        return T.mse(h, Tensor(np.ones((3, 5))))

    assert fd_gradcheck(loss_fn, {"x": x, "w": w, "b": b}) < 1e-6


def test_tape_replay_determinism():
    rng = np.random.default_rng(11)
    xdata = rng.normal(size=(2, 3, 8)).astype(np.float32)
    wdata = rng.normal(size=(4, 3, 3)).astype(np.float32)

    def run():
        x = T.param(xdata.copy())
        w = T.param(wdata.copy())
        b = T.param(np.zeros(4, dtype=np.float32))
        drop = np.random.default_rng(99)
        with T.record() as tape:
            y = T.relu(T.conv1d_causal(x, w, b, dilation=2))
            y = T.channel_dropout(y, 0.4, True, drop)
            loss = T.sum_all(T.mul(y, y))
        T.backward(loss, tape)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


def test_tapes_are_thread_local():
    import threading

    results = {}

    def worker(tag, scale):
        x = T.param(np.full(4, scale))
        with T.record() as tape:
            loss = T.sum_all(T.mul(x, x))
        T.backward(loss, tape)
        results[tag] = (len(tape.entries), x.grad.copy())

    threads = [
        threading.Thread(target=worker, args=(i, float(i + 1))) for i in range(4)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        n_entries, grad = results[i]
        assert n_entries == 2  # mul + sum, no cross-thread bleed
        np.testing.assert_allclose(grad, 2.0 * (i + 1))


def test_backward_visits_reverse_order_once():
    calls = []
    x = T.param(np.ones(2))
    with T.record() as tape:
        a = T.mul(x, x)
        b = T.add(a, x)
        loss = T.sum_all(b)
    originals = [(e, e.backward) for e in tape.entries]
    for i, (entry, fn) in enumerate(originals):
        def wrapped(g, i=i, fn=fn):
            calls.append(i)
            return fn(g)
        entry.backward = wrapped
    T.backward(loss, tape)
    assert calls == sorted(calls, reverse=True)
    assert len(calls) == len(set(calls))
