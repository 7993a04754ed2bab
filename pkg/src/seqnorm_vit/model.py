"""Vision Transformer assembly with a pluggable attention mechanism.

Images are channel-last: 2D batches are ``[B, H, W, C]``, 3D batches are
``[B, D, H, W, C]``.  Token-sequence inputs (e.g. precomputed slide-tile
features) are ``[B, N, F]`` and may be padded, with per-sample lengths.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, AttentionLayer, Mechanism
from .autograd import Tensor
from .nn import MLP, LayerNorm, Linear, Module, ModuleList, trunc_normal


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


class InputKind(str, enum.Enum):
    IMAGE2D = "image2d"
    IMAGE3D = "image3d"
    TOKENS = "tokens"


@dataclass
class ViTConfig:
    """Model hyperparameters.

    ``image_size`` is ``(H, W)`` or ``(D, H, W)``; ``patch_size`` uses the
    same axis order.  For token inputs ``token_dim`` is the feature size and
    ``max_seq_len`` bounds the sequence length.  ``max_seq_len`` defaults to
    the number of patches of ``image_size``.
    """

    input_kind: InputKind = InputKind.IMAGE2D
    channels: int = 1
    image_size: tuple[int, ...] = (64, 64)
    patch_size: tuple[int, ...] = (16, 16)
    token_dim: int | None = None
    model_dim: int = 128
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    layers: int = 4
    mlp_dim: int = 128
    num_classes: int = 2
    max_seq_len: int | None = None
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.input_kind = InputKind(self.input_kind)
        if isinstance(self.attention, dict):
            att = dict(self.attention)
            att.setdefault("model_dim", self.model_dim)
            self.attention = AttentionConfig(**att)
        if self.attention.model_dim != self.model_dim:
            raise ConfigError(
                f"attention.model_dim={self.attention.model_dim} differs from model_dim={self.model_dim}"
            )
        for name in ("model_dim", "layers", "mlp_dim", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.input_kind is InputKind.TOKENS:
            if not self.token_dim or self.token_dim <= 0:
                raise ConfigError("token inputs need a positive token_dim")
            if not self.max_seq_len:
                raise ConfigError("token inputs need max_seq_len")
        else:
            self.image_size = tuple(int(s) for s in self.image_size)
            self.patch_size = tuple(int(s) for s in self.patch_size)
            rank = 2 if self.input_kind is InputKind.IMAGE2D else 3
            if len(self.image_size) != rank or len(self.patch_size) != rank:
                raise ConfigError(
                    f"{self.input_kind.value} needs {rank} image and patch extents, "
                    f"got image_size={self.image_size} patch_size={self.patch_size}"
                )
            check_divisible(self.image_size, self.patch_size)
            if self.max_seq_len is None:
                self.max_seq_len = self.num_patches

    @property
    def num_patches(self) -> int:
        if self.input_kind is InputKind.TOKENS:
            return int(self.max_seq_len)
        return int(np.prod(self.image_size) // np.prod(self.patch_size))

    @property
    def patch_dim(self) -> int:
        if self.input_kind is InputKind.TOKENS:
            return int(self.token_dim)
        return int(np.prod(self.patch_size)) * self.channels

    @property
    def mechanism(self) -> Mechanism:
        return self.attention.mechanism

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_kind"] = self.input_kind.value
        d["attention"]["mechanism"] = self.attention.mechanism.value
        d["image_size"] = list(self.image_size)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ViTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(unknown)}")
        d = dict(d)
        att = d.get("attention")
        if isinstance(att, dict):
            att_known = {f.name for f in dataclasses.fields(AttentionConfig)}
            bad = sorted(set(att) - att_known)
            if bad:
                raise ConfigError(f"unknown attention config field(s): {', '.join(bad)}")
        for key in ("image_size", "patch_size"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ViTConfig":
        d = self.to_dict()
        att = changes.pop("attention", None)
        mech = changes.pop("mechanism", None)
        d.update(changes)
        if att is not None:
            d["attention"].update(att)
        if mech is not None:
            d["attention"]["mechanism"] = Mechanism.parse(mech).value
        d["attention"]["model_dim"] = d["model_dim"]
        return ViTConfig.from_dict(d)


def check_divisible(image_size, patch_size) -> None:
    names = ("H", "W") if len(image_size) == 2 else ("D", "H", "W")
    for axis, size, p in zip(names, image_size, patch_size):
        if p <= 0 or size % p:
            raise ConfigError(f"image extent {axis}={size} is not divisible by patch extent {p}")


# Hyperparameters of the three published configurations.  The 3D patch is
# listed there as (16, 16, 4) for 256x256x32 volumes; here axes are (D, H, W).
PRESETS: dict[str, dict[str, Any]] = {
    "ViT2D": dict(
        input_kind="image2d", channels=3, image_size=(224, 224), patch_size=(16, 16),
        model_dim=1024, inner_dim=512, layers=8, heads=8, mlp_dim=1024,
    ),
    "ViTWSI": dict(
        input_kind="tokens", token_dim=2048, max_seq_len=11039,
        model_dim=512, inner_dim=512, layers=2, heads=8, mlp_dim=512,
    ),
    "ViT3D": dict(
        input_kind="image3d", channels=1, image_size=(32, 256, 256), patch_size=(4, 16, 16),
        model_dim=1024, inner_dim=512, layers=8, heads=8, mlp_dim=1024,
    ),
    # desk-scale variant used by the synthetic experiments
    "toy": dict(
        input_kind="image2d", channels=1, image_size=(64, 64), patch_size=(16, 16),
        model_dim=128, inner_dim=64, layers=4, heads=4, mlp_dim=128,
    ),
}


def preset(name: str, mechanism="seqnorm", num_classes: int = 2, **overrides) -> ViTConfig:
    try:
        p = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    p.update(overrides)
    att = dict(
        mechanism=Mechanism.parse(mechanism),
        model_dim=p["model_dim"],
        inner_dim=p.pop("inner_dim"),
        heads=p.pop("heads"),
    )
    att.update(p.pop("attention", {}) or {})
    return ViTConfig(attention=AttentionConfig(**att), num_classes=num_classes, **p)


def parameter_count(config: ViTConfig) -> int:
    """Closed-form number of scalar parameters of :class:`ViT`."""
    dm, di, hid = config.model_dim, config.attention.inner_dim, config.mlp_dim
    n = config.patch_dim * dm + dm  # patch embedding
    n += dm + (config.max_seq_len + 1) * dm  # class token, positional table
    block = 2 * dm + 4 * dm * di + 2 * dm + (dm * hid + hid) + (hid * dm + dm)
    if config.attention.bias:
        block += 3 * di + dm
    if config.mechanism is Mechanism.SEQNORM:
        block += 6 * di
    n += config.layers * block
    n += 2 * dm + dm * config.num_classes + config.num_classes
    return n


# -- patching -----------------------------------------------------------------
def patchify(image, patch_size) -> np.ndarray:
    """Split an image into raster-ordered, channel-last flattened patches.

    Accepts a single image (``[H, W, C]`` / ``[D, H, W, C]``) or a batch with
    one extra leading axis.  Returns ``[N, prod(patch) * C]`` or
    ``[B, N, prod(patch) * C]``.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    patch_size = tuple(int(p) for p in patch_size)
    rank = len(patch_size)
    single = x.ndim == rank + 1
    if not single and x.ndim != rank + 2:
        raise ConfigError(f"image of shape {x.shape} does not match a {rank}D patch {patch_size}")
    if single:
        x = x[None]
    spatial = x.shape[1:-1]
    check_divisible(spatial, patch_size)
    b, c = x.shape[0], x.shape[-1]
    grid = [s // p for s, p in zip(spatial, patch_size)]
    shape = [b]
    for g, p in zip(grid, patch_size):
        shape += [g, p]
    shape.append(c)
    x = x.reshape(shape)
    # [B, g1, p1, g2, p2, (g3, p3), C] -> [B, g1, g2, (g3), p1, p2, (p3), C]
    grid_axes = [1 + 2 * i for i in range(rank)]
    patch_axes = [2 + 2 * i for i in range(rank)]
    x = x.transpose([0] + grid_axes + patch_axes + [rank * 2 + 1])
    out = x.reshape(b, int(np.prod(grid)), int(np.prod(patch_size)) * c)
    return out[0] if single else out


# -- model ------------------------------------------------------------------------
class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator, dtype):
        super().__init__()
        self.norm1 = LayerNorm(config.model_dim, config.norm_eps, dtype=dtype)
        self.attn = AttentionLayer(config.attention, rng, dtype=dtype)
        self.norm2 = LayerNorm(config.model_dim, config.norm_eps, dtype=dtype)
        self.mlp = MLP(config.model_dim, config.mlp_dim, rng, dtype=dtype)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class ViT(Module):
    def __init__(self, config: ViTConfig, seed: int = 0, dtype=None):
        super().__init__()
        self.config = config
        dtype = np.dtype(dtype) if dtype is not None else ag.default_dtype()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        dm = config.model_dim
        self.patch_embed = Linear(config.patch_dim, dm, rng, dtype=dtype)
        self.cls_token = Tensor(np.zeros((1, 1, dm), dtype=dtype), requires_grad=True)
        self.pos_embed = Tensor(
            trunc_normal(rng, (1, config.max_seq_len + 1, dm), dtype=dtype), requires_grad=True
        )
        self.blocks = ModuleList(Block(config, rng, dtype) for _ in range(config.layers))
        self.norm = LayerNorm(dm, config.norm_eps, dtype=dtype)
        self.head = Linear(dm, config.num_classes, rng, dtype=dtype)

    def tokens(self, batch) -> np.ndarray:
        """Raw input batch -> ``[B, N, patch_dim]`` token array."""
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        cfg = self.config
        if cfg.input_kind is InputKind.TOKENS:
            if x.ndim != 3 or x.shape[-1] != cfg.token_dim:
                raise ConfigError(f"token batch must be [B, N, {cfg.token_dim}], got {x.shape}")
            return x.astype(self.dtype, copy=False)
        rank = len(cfg.patch_size)
        expected = tuple(cfg.image_size) + (cfg.channels,)
        if x.ndim != rank + 2 or x.shape[1:] != expected:
            raise ConfigError(f"image batch must be [B, {', '.join(map(str, expected))}], got {x.shape}")
        return patchify(x, cfg.patch_size).astype(self.dtype, copy=False)

    def embed(self, batch, lengths=None) -> tuple[Tensor, np.ndarray | None]:
        tok = self.tokens(batch)
        b, n, _ = tok.shape
        if n > self.config.max_seq_len:
            raise ConfigError(
                f"sequence of {n} tokens exceeds the positional table ({self.config.max_seq_len})"
            )
        x = self.patch_embed(Tensor(tok))
        cls = ag.broadcast_to(self.cls_token, (b, 1, self.config.model_dim))
        x = ag.concat([cls, x], axis=1) + self.pos_embed[:, : n + 1]
        mask = None
        if lengths is not None:
            lengths = np.asarray(lengths)
            if lengths.shape != (b,) or (lengths < 1).any() or (lengths > n).any():
                raise ConfigError(f"lengths must be {b} values in [1, {n}]")
            mask = np.ones((b, n + 1), dtype=bool)
            mask[:, 1:] = np.arange(n)[None, :] < lengths[:, None]
        return x, mask

    def features(self, batch, lengths=None) -> Tensor:
        x, mask = self.embed(batch, lengths)
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)[:, 0, :]

    def forward(self, batch, lengths=None) -> Tensor:
        """Logits ``[B, num_classes]`` read from the class-token position."""
        return self.head(self.features(batch, lengths))


def build_model(config: ViTConfig, seed: int = 0, dtype=None) -> ViT:
    return ViT(config, seed=seed, dtype=dtype)
