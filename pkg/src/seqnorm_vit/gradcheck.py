"""Finite-difference verification of analytic gradients.

The reference gradient is a central difference ``(f(x+h) - f(x-h)) / 2h``
evaluated one element at a time, with no use of the backward rules.  Errors
are reported per tensor as
``||analytic - numeric|| / max(||analytic||, ||numeric||, GRAD_FLOOR)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, Mechanism
from .autograd import Tensor, no_grad, precision
from .metrics import cross_entropy
from .model import ViT, ViTConfig


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


# Denominator floor.  A parameter whose true gradient vanishes (e.g. the
# pre-attention LayerNorm shift, which sequence normalization cancels) has
# analytic ~1e-16 and finite-difference ~1e-10; relative error is meaningless
# there, so such tensors are compared in absolute terms (|diff| <= tol * floor).
GRAD_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class GradcheckReport:
    subject: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "passed": self.passed,
            "max_rel_error": self.max_error,
            "tolerance": self.tolerance,
            "errors": self.errors,
        }


def check(fn: Callable[..., Tensor], inputs: list[Tensor], h: float = 1e-5, seed: int = 0,
          subject: str = "fn", tolerance: float = 1e-6) -> GradcheckReport:
    """Compare backward() with finite differences for ``loss = sum(fn(*inputs) * w)``.

    ``w`` is a fixed random weighting so every output element matters.
    """
    with no_grad():
        out_shape = fn(*inputs).shape
    w = np.random.default_rng(seed + 7919).standard_normal(out_shape).astype(inputs[0].dtype)

    def value() -> float:
        with no_grad():
            return float((fn(*inputs).data * w).sum())

    for t in inputs:
        t.grad = None
    loss = (fn(*inputs) * Tensor(w)).sum()
    loss.backward()
    report = GradcheckReport(subject, tolerance=tolerance)
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(value, t.data, h)
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad  # unused input
        report.errors[f"input{i}"] = relative_error(analytic, numeric)
    return report


# -- per-op cases ---------------------------------------------------------------
def _leaf(rng, *shape, positive=False, low=0.5):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + low
    return Tensor(x, requires_grad=True)


def _away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x), requires_grad=True)


OP_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]] = {
    "add": lambda r: (lambda a, b: a + b, [_leaf(r, 3, 4), _leaf(r, 4)]),
    "sub": lambda r: (lambda a, b: a - b, [_leaf(r, 2, 3, 4), _leaf(r, 3, 1)]),
    "mul": lambda r: (lambda a, b: a * b, [_leaf(r, 3, 4), _leaf(r, 1, 4)]),
    "div": lambda r: (lambda a, b: a / b, [_leaf(r, 3, 4), _leaf(r, 3, 4, positive=True)]),
    "scale": lambda r: (lambda a: ag.scale(a, 2.5), [_leaf(r, 5)]),
    "exp": lambda r: (ag.exp, [_leaf(r, 3, 3)]),
    "log": lambda r: (ag.log, [_leaf(r, 3, 3, positive=True)]),
    "tanh": lambda r: (ag.tanh, [_leaf(r, 4, 2)]),
    "gelu": lambda r: (ag.gelu, [_leaf(r, 4, 5)]),
    "abs": lambda r: (ag.absolute, [_away_from_zero(r, 3, 4)]),
    "pow": lambda r: (lambda a: a**1.5, [_leaf(r, 3, 4, positive=True)]),
    "matmul": lambda r: (ag.matmul, [_leaf(r, 2, 3, 4), _leaf(r, 4, 5)]),
    "matmul_batched": lambda r: (ag.matmul, [_leaf(r, 2, 3, 4), _leaf(r, 2, 4, 2)]),
    "matmul_transposed": lambda r: (lambda a, b: a @ b.T, [_leaf(r, 2, 3, 4), _leaf(r, 2, 5, 4)]),
    "softmax": lambda r: (lambda a: ag.softmax(a, axis=-1), [_leaf(r, 3, 5)]),
    "log_softmax": lambda r: (lambda a: ag.log_softmax(a, axis=-1), [_leaf(r, 3, 5)]),
    "sum": lambda r: (lambda a: a.sum(axis=1, keepdims=True), [_leaf(r, 3, 4, 2)]),
    "mean": lambda r: (lambda a: a.mean(axis=(0, 2)), [_leaf(r, 3, 4, 2)]),
    "reshape": lambda r: (lambda a: a.reshape(4, 6), [_leaf(r, 2, 3, 4)]),
    "transpose": lambda r: (lambda a: a.transpose(2, 0, 1), [_leaf(r, 2, 3, 4)]),
    "concat": lambda r: (lambda a, b: ag.concat([a, b], axis=1), [_leaf(r, 2, 1, 3), _leaf(r, 2, 4, 3)]),
    "getitem": lambda r: (lambda a: a[:, 1:3], [_leaf(r, 3, 5)]),
    "broadcast": lambda r: (lambda a: ag.broadcast_to(a, (4, 2, 3)), [_leaf(r, 1, 1, 3)]),
    "normalize": lambda r: (lambda a: ag.normalize(a, axis=-2, eps=1e-5), [_leaf(r, 2, 6, 3)]),
    "normalize_masked": lambda r: (
        lambda a: ag.normalize(a, axis=-2, eps=1e-5, mask=np.array([[1], [1], [1], [0], [1]], dtype=float)),
        [_leaf(r, 5, 3)],
    ),
    "l1_normalize": lambda r: (lambda a: ag.l1_normalize(a, axis=-2, eps=1e-5), [_away_from_zero(r, 2, 5, 3)]),
    "seq_stats": lambda r: (lambda a: ag.concat(list(ag.seq_stats(a)), axis=-1), [_leaf(r, 6, 3)]),
}


# (h, tolerance) per precision.  32-bit differences are dominated by rounding,
# so that mode is a coarse sanity check only.
SETTINGS = {"f64": (1e-5, 1e-6), "f32": (1e-2, 1e-1)}


def check_op(name: str, seed: int = 0, prec: str = "f64") -> GradcheckReport:
    h, tol = SETTINGS[prec]
    with precision(prec):
        fn, inputs = OP_CASES[name](np.random.default_rng(seed))
        for t in inputs:
            t.data = t.data.astype(ag.default_dtype())
        return check(fn, inputs, h=h, seed=seed, subject=name, tolerance=tol)


# -- whole-model check -------------------------------------------------------------
def small_config(mechanism, layers: int = 2) -> ViTConfig:
    """A model small enough for element-wise finite differences."""
    return ViTConfig(
        input_kind="image2d", channels=1, image_size=(8, 8), patch_size=(4, 4),
        model_dim=16, attention=AttentionConfig(Mechanism.parse(mechanism), 16, 8, 2),
        layers=layers, mlp_dim=16, num_classes=2,
    )


def check_model(config: ViTConfig, seed: int = 0, batch: int = 3, prec: str = "f64",
                perturb: float = 0.3) -> GradcheckReport:
    """Finite-difference check of every model parameter under cross-entropy.

    Parameters are randomized around their initialization (``perturb`` std)
    so affine parameters are not at their identity values.
    """
    h, tolerance = SETTINGS[prec]
    with precision(prec) as dtype:
        model = ViT(config, seed=seed, dtype=dtype)
        rng = np.random.default_rng(seed + 1)
        for _, p in model.named_parameters():
            p.data = (p.data + perturb * rng.standard_normal(p.shape)).astype(dtype)
        shape = (batch,) + tuple(config.image_size) + (config.channels,)
        x = rng.standard_normal(shape).astype(dtype)
        y = np.arange(batch) % config.num_classes

        def value() -> float:
            with no_grad():
                return cross_entropy(model(x), y).item()

        model.zero_grad()
        cross_entropy(model(x), y).backward()
        report = GradcheckReport(f"model[{config.mechanism.value}]", tolerance=tolerance)
        for name, p in model.named_parameters():
            numeric = numerical_gradient(value, p.data, h)
            report.errors[name] = relative_error(p.grad, numeric)
    return report


def check_mechanism(mechanism, seed: int = 0, layers: int = 2, prec: str = "f64") -> GradcheckReport:
    return check_model(small_config(mechanism, layers), seed=seed, prec=prec)
