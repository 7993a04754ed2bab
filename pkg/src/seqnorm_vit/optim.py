"""SGD and AdamW (decoupled weight decay)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return param - lr * grad


@dataclass
class AdamState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; returns the new parameter and the advanced state."""
    b1, b2 = betas
    t = state.step + 1
    m = grad * (1 - b1) if state.m is None else b1 * state.m + (1 - b1) * grad
    v = grad * grad * (1 - b2) if state.v is None else b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = param - lr * weight_decay * param
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype, copy=False), AdamState(t, m, v)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = sgd_step(p.data, p.grad, self.lr).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class AdamW:
    params: list[Tensor]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.states = [AdamState() for _ in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.states[i] = adamw_step(
                p.data, p.grad, self.states[i], self.lr, self.betas, self.weight_decay, self.eps
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
