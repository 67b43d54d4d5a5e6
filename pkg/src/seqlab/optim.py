"""Parameter-update rules (SGD, RMSprop, Adam) and plateau annealing.

All updates are in-place and deterministic: identical grads and state
produce identical parameters. Moment buffers mirror parameter shapes and
are exposed for checkpointing.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor

Params = dict[str, Tensor]


class NumericalFailure(RuntimeError):
    """Training produced a non-finite quantity and must abort."""


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def _check_grads(params: Params) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalFailure(f"non-finite gradient in parameter {name!r}")


class Optimizer:
    """Base: holds the parameter map, hyperparameters, and step counter."""

    kind = "base"

    def __init__(self, params: Params, lr: float):
        self.params = params
        self.lr = float(lr)
        self.step_count = 0
        self.state: dict[str, np.ndarray] = {}

    def step(self) -> None:
        _check_grads(self.params)
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self._update(name, p)

    def _update(self, name: str, p: Tensor) -> None:
        raise NotImplementedError

    def _buffer(self, key: str, like: np.ndarray) -> np.ndarray:
        buf = self.state.get(key)
        if buf is None:
            buf = np.zeros_like(like)
            self.state[key] = buf
        return buf


class Sgd(Optimizer):
    kind = "sgd"

    def __init__(self, params: Params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)

    def _update(self, name: str, p: Tensor) -> None:
        g = p.grad
        if self.momentum > 0.0:
            buf = self._buffer(f"{name}.momentum", p.data)
            buf *= self.momentum
            buf += g
            g = buf
        p.data -= (self.lr * g).astype(p.data.dtype, copy=False)


class RmsProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, params: Params, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        super().__init__(params, lr)
        self.alpha = float(alpha)
        self.eps = float(eps)

    def _update(self, name: str, p: Tensor) -> None:
        g = p.grad
        sq = self._buffer(f"{name}.sq", p.data)
        sq *= self.alpha
        sq += (1.0 - self.alpha) * g * g
        p.data -= (self.lr * g / (np.sqrt(sq) + self.eps)).astype(p.data.dtype, copy=False)


class Adam(Optimizer):
    kind = "adam"

    def __init__(
        self,
        params: Params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def _update(self, name: str, p: Tensor) -> None:
        g = p.grad
        m = self._buffer(f"{name}.m", p.data)
        v = self._buffer(f"{name}.v", p.data)
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        t = self.step_count
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
            p.data.dtype, copy=False
        )


def make_optimizer(kind: str, params: Params, lr: float, **kwargs) -> Optimizer:
    if kind == "sgd":
        return Sgd(params, lr, momentum=kwargs.get("momentum", 0.0))
    if kind == "rmsprop":
        return RmsProp(
            params, lr, alpha=kwargs.get("alpha", 0.99), eps=kwargs.get("eps", 1e-8)
        )
    if kind == "adam":
        return Adam(
            params,
            lr,
            beta1=kwargs.get("beta1", 0.9),
            beta2=kwargs.get("beta2", 0.999),
            eps=kwargs.get("eps", 1e-8),
        )
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# learning-rate annealing on a validation plateau
# ---------------------------------------------------------------------------


def anneal_on_plateau(
    lr: float,
    history: Sequence[float],
    factor: float = 0.5,
    patience: int = 5,
    threshold: float = 1e-4,
    mode: str = "min",
) -> float:
    """Replay a metric history and return the annealed learning rate.

    The rate is multiplied by ``factor`` each time the metric fails to
    improve (relative threshold) for ``patience`` consecutive
    evaluations; the stall counter resets after each anneal.
    """
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    best: Optional[float] = None
    bad = 0
    out = float(lr)
    for value in history:
        if best is None:
            best = value
            continue
        if mode == "min":
            improved = value < best * (1.0 - threshold)
        else:
            improved = value > best * (1.0 + threshold)
        if improved:
            best = value
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                out *= factor
                bad = 0
    return out


class PlateauAnnealer:
    """Stateful companion of :func:`anneal_on_plateau` for training loops."""

    def __init__(
        self,
        lr: float,
        factor: float = 0.5,
        patience: int = 5,
        threshold: float = 1e-4,
        mode: str = "min",
    ):
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.mode = mode
        self.best: Optional[float] = None
        self.bad = 0

    def update(self, value: float) -> float:
        if self.best is None:
            self.best = value
            return self.lr
        if self.mode == "min":
            improved = value < self.best * (1.0 - self.threshold)
        else:
            improved = value > self.best * (1.0 + self.threshold)
        if improved:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr
