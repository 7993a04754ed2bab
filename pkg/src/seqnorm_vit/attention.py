"""Vanilla softmax, sequence-normalized softmax-free, and SimA attention.

All three share :class:`AttentionLayer`; the mechanism only changes what
happens between the Q/K/V projections and the output projection.

Shapes: activations are ``[B, N, D]``; per-head views are ``[B, J, N, D/J]``.
An optional ``mask`` of shape ``[B, N]`` (1 = real token, 0 = padding)
removes padded tokens from every statistic and every sum over keys.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ShapeError
from .nn import Module, trunc_normal


class Mechanism(str, enum.Enum):
    VANILLA = "vanilla"
    SEQNORM = "seqnorm"
    SIMA = "sima"

    @classmethod
    def parse(cls, value) -> "Mechanism":
        if isinstance(value, Mechanism):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "vanilla": cls.VANILLA,
            "softmax": cls.VANILLA,
            "seqnorm": cls.SEQNORM,
            "seqnormfree": cls.SEQNORM,
            "softmaxfree": cls.SEQNORM,
            "sima": cls.SIMA,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown attention mechanism {value!r}") from None


@dataclass
class AttentionConfig:
    mechanism: Mechanism = Mechanism.SEQNORM
    model_dim: int = 64
    inner_dim: int = 64
    heads: int = 4
    eps: float = 1e-5
    bias: bool = False

    def __post_init__(self):
        self.mechanism = Mechanism.parse(self.mechanism)
        for name in ("model_dim", "inner_dim", "heads"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"attention.{name} must be positive")
        if self.inner_dim % self.heads:
            raise ValueError(
                f"attention.inner_dim={self.inner_dim} is not divisible by heads={self.heads}"
            )
        if self.eps < 0:
            raise ValueError("attention.eps must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.inner_dim // self.heads


# -- head reshaping ----------------------------------------------------------
def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, j, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, j * dh)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, heads: int) -> None:
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"Q, K, V must share a [B, N, D] shape; got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] % heads:
        raise ShapeError(f"D={q.shape[-1]} is not divisible by J={heads}")


def _token_mask(mask, like: Tensor) -> np.ndarray | None:
    """[B, N] mask -> [B, N, 1] array in the activation dtype."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=like.dtype)
    if m.shape != like.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match tokens {like.shape[:2]}")
    return m[:, :, None]


# -- mechanisms --------------------------------------------------------------
def vanilla_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """softmax(Q_j K_j^T / sqrt(D/J)) V_j per head, heads re-concatenated.

    Materializes the full ``[B, J, N, N]`` score and weight matrices.
    """
    _check_qkv(q, k, v, heads)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    # folding 1/sqrt(d) into Q avoids one extra N x N buffer
    scores = ag.matmul(ag.scale(qh, 1.0 / math.sqrt(q.shape[-1] // heads)), kh.T, op="scores")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        bias = np.where(m, 0.0, -1e30).astype(q.dtype)[:, None, None, :]
        scores = scores + Tensor(bias)
    weights = ag.softmax(scores, axis=-1)
    return merge_heads(weights @ vh)


def seq_normalize_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, mask=None) -> Tensor:
    """Standardize every feature over the sequence axis, then scale and shift.

    Statistics are per sample and per feature; nothing is tracked across
    batches, so train and eval behave identically.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [B, N, D], got {x.shape}")
    m = _token_mask(mask, x)
    out = ag.normalize(x, axis=-2, eps=eps, mask=m) * gamma + beta
    if m is not None:
        out = out * Tensor(m)
    return out


def _linear_order(qh: Tensor, kh: Tensor, vh: Tensor, factor) -> Tensor:
    # K^T V is only (D/J) x (D/J) per head; no N x N object is formed
    state = ag.matmul(kh.T, vh, op="kv_state")
    if factor is not None:
        state = state * factor
    return merge_heads(qh @ state)


def seqnorm_attention(
    q: Tensor, k: Tensor, v: Tensor, layer: "AttentionLayer", heads: int, eps: float, mask=None
) -> Tensor:
    """Softmax-free attention on sequence-normalized Q, K, V.

    Normalization runs on the concatenated D features before the head split.
    Each head then computes (1/N) * Q'_j (K'_j^T V'_j).
    """
    _check_qkv(q, k, v, heads)
    qn = seq_normalize_affine(q, layer.gamma_q, layer.beta_q, eps, mask)
    kn = seq_normalize_affine(k, layer.gamma_k, layer.beta_k, eps, mask)
    vn = seq_normalize_affine(v, layer.gamma_v, layer.beta_v, eps, mask)
    if mask is None:
        factor = 1.0 / q.shape[1]
    else:
        counts = np.asarray(mask, dtype=q.dtype).sum(axis=1)
        factor = Tensor((1.0 / counts).astype(q.dtype)[:, None, None, None])
    return _linear_order(split_heads(qn, heads), split_heads(kn, heads), split_heads(vn, heads), factor)


def l1_normalize(x: Tensor, eps: float, mask=None) -> Tensor:
    """Divide each feature column by its l1 norm over the sequence axis."""
    m = _token_mask(mask, x)
    if m is not None:
        x = x * Tensor(m)
    return ag.l1_normalize(x, axis=-2, eps=eps)


def sima_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, eps: float = 1e-5, mask=None) -> Tensor:
    """SimA: l1-normalized Q and K columns, V untouched, computed as Q(K^T V)."""
    _check_qkv(q, k, v, heads)
    # column-wise l1 norms do not depend on the head split
    qn = l1_normalize(q, eps, mask)
    kn = l1_normalize(k, eps, mask)
    return _linear_order(split_heads(qn, heads), split_heads(kn, heads), split_heads(v, heads), None)


# -- layer -------------------------------------------------------------------
class AttentionLayer(Module):
    """Multi-head self-attention with a pluggable mechanism.

    Parameters: ``w_q``, ``w_k``, ``w_v`` of shape [D', D] and ``w_o`` of
    shape [D, D'].  The seqnorm mechanism adds ``gamma_*``/``beta_*`` of
    shape [D] for each of q, k, v, initialized to the identity transform.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.config = config
        dtype = dtype or ag.default_dtype()
        dm, di = config.model_dim, config.inner_dim
        self.w_q = Tensor(trunc_normal(rng, (dm, di), dtype=dtype), requires_grad=True)
        self.w_k = Tensor(trunc_normal(rng, (dm, di), dtype=dtype), requires_grad=True)
        self.w_v = Tensor(trunc_normal(rng, (dm, di), dtype=dtype), requires_grad=True)
        self.w_o = Tensor(trunc_normal(rng, (di, dm), dtype=dtype), requires_grad=True)
        if config.bias:
            for name, size in (("b_q", di), ("b_k", di), ("b_v", di), ("b_o", dm)):
                setattr(self, name, Tensor(np.zeros(size, dtype=dtype), requires_grad=True))
        if config.mechanism is Mechanism.SEQNORM:
            for which in "qkv":
                setattr(self, f"gamma_{which}", Tensor(np.ones(di, dtype=dtype), requires_grad=True))
                setattr(self, f"beta_{which}", Tensor(np.zeros(di, dtype=dtype), requires_grad=True))

    def forward(self, x: Tensor, mask=None) -> Tensor:
        q, k, v = project_qkv(x, self)
        out = attention(q, k, v, self, mask) @ self.w_o
        if self.config.bias:
            out = out + self.b_o
        return out


def project_qkv(x: Tensor, layer: AttentionLayer) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != layer.w_q.shape[0]:
        raise ShapeError(f"input feature dim {x.shape[-1]} != model dim {layer.w_q.shape[0]}")
    q, k, v = x @ layer.w_q, x @ layer.w_k, x @ layer.w_v
    if layer.config.bias:
        q, k, v = q + layer.b_q, k + layer.b_k, v + layer.b_v
    return q, k, v


def attention(q: Tensor, k: Tensor, v: Tensor, layer: AttentionLayer, mask=None) -> Tensor:
    """Dispatch on ``layer.config.mechanism`` without the projections."""
    cfg = layer.config
    if cfg.mechanism is Mechanism.VANILLA:
        return vanilla_attention(q, k, v, cfg.heads, mask)
    if cfg.mechanism is Mechanism.SEQNORM:
        return seqnorm_attention(q, k, v, layer, cfg.heads, cfg.eps, mask)
    return sima_attention(q, k, v, cfg.heads, cfg.eps, mask)
