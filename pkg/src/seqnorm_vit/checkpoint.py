"""Binary checkpoint format and vanilla -> softmax-free weight transfer.

Layout (all integers little-endian)::

    8 bytes   magic  b"SQNMVIT1"
    u32       format version
    u64       header length in bytes
    ...       header: UTF-8 JSON {"manifest": [...], "metadata": {...}}
    ...       zero padding up to a 64-byte boundary
    ...       blob: raw little-endian parameter bytes

Each manifest entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attention import Mechanism
from .model import ViT, ViTConfig

MAGIC = b"SQNMVIT1"
VERSION = 1
ALIGN = 64

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ViT, **metadata) -> "Checkpoint":
        meta = {"config": model.config.to_dict()}
        meta.update(metadata)
        return cls(model.state_dict(), meta)

    @property
    def config(self) -> ViTConfig:
        try:
            return ViTConfig.from_dict(self.metadata["config"])
        except KeyError:
            raise CheckpointError("checkpoint metadata carries no model config") from None

    def manifest(self) -> list[dict[str, Any]]:
        entries, offset = [], 0
        for name, arr in self.params.items():
            try:
                dtype = _DTYPE_NAMES[arr.dtype]
            except KeyError:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}") from None
            entries.append(
                {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
            )
            offset += arr.nbytes
        return entries

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"manifest": self.manifest(), "metadata": self.metadata}, sort_keys=True
        ).encode("utf-8")
        prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
        pad = (-len(prefix)) % ALIGN
        blob = b"".join(
            np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_NAMES[arr.dtype]]).tobytes()
            for arr in self.params.values()
        )
        return prefix + b"\0" * pad + blob

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 20 or raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if 20 + hlen > len(raw):
            raise CheckpointError("checkpoint header is truncated")
        try:
            header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
            manifest = header["manifest"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        start = 20 + hlen + ((-(20 + hlen)) % ALIGN)
        blob = memoryview(raw)[start:]

        seen: set[str] = set()
        expected = 0
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in manifest:
            missing = {"name", "dtype", "shape", "offset", "nbytes"} - set(entry)
            if missing:
                raise CheckpointError(f"manifest entry lacks {', '.join(sorted(missing))}")
            name = entry["name"]
            if name in seen:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            seen.add(name)
            try:
                dtype = _DTYPES[entry["dtype"]]
            except KeyError:
                raise CheckpointError(f"{name}: unknown dtype {entry['dtype']!r}") from None
            shape = tuple(int(s) for s in entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if nbytes != entry["nbytes"]:
                raise CheckpointError(f"{name}: span {entry['nbytes']} does not match shape {shape}")
            if entry["offset"] != expected:
                raise CheckpointError(f"{name}: unexpected blob offset {entry['offset']}")
            expected += nbytes
            params[name] = (shape, dtype, entry["offset"])
        if len(blob) != expected:
            raise CheckpointError(
                f"corrupt blob: expected {expected} bytes of weights, found {len(blob)}"
            )
        arrays = OrderedDict(
            (name, np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=off)
             .reshape(shape).astype(dt.newbyteorder("="), copy=True))
            for name, (shape, dt, off) in params.items()
        )
        return cls(arrays, header.get("metadata", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def restore(self, model: ViT) -> ViT:
        """Copy weights into ``model`` after checking names and shapes."""
        own = OrderedDict(model.named_parameters())
        mismatched = [
            f"{n} {tuple(self.params[n].shape)} vs {p.shape}"
            for n, p in own.items()
            if n in self.params and tuple(self.params[n].shape) != p.shape
        ]
        missing = [n for n in own if n not in self.params]
        unexpected = [n for n in self.params if n not in own]
        if mismatched or missing or unexpected:
            first = (mismatched or missing or unexpected)[0].split(" ")[0]
            parts = [f"{len(mismatched) + len(missing) + len(unexpected)} offending parameter(s), first {first}"]
            for label, names in (("shape mismatch", mismatched), ("missing", missing), ("unexpected", unexpected)):
                if names:
                    more = f" (+{len(names) - 5} more)" if len(names) > 5 else ""
                    parts.append(f"{label}: " + ", ".join(names[:5]) + more)
            raise CheckpointError("; ".join(parts))
        for name, p in own.items():
            p.data = self.params[name].astype(p.dtype, copy=True)
        return model

    def build(self, config: ViTConfig | None = None) -> ViT:
        """Instantiate a model for ``config`` (default: the stored one) and load weights."""
        config = config or self.config
        dtypes = {a.dtype for a in self.params.values()}
        dtype = dtypes.pop() if len(dtypes) == 1 else None
        return self.restore(ViT(config, dtype=dtype))


def save_checkpoint(model: ViT, path, **metadata) -> Path:
    return Checkpoint.from_model(model, **metadata).save(path)


def load_checkpoint(path, config: ViTConfig | None = None) -> ViT:
    return Checkpoint.load(path).build(config)


# -- transfer --------------------------------------------------------------------
_TRANSFER_KEYS = (
    "input_kind", "channels", "image_size", "patch_size", "token_dim",
    "model_dim", "layers", "mlp_dim", "num_classes", "max_seq_len",
)


@dataclass
class TransferReport:
    copied: list[str]
    fresh: list[str]

    def to_dict(self) -> dict[str, list[str]]:
        return {"copied": self.copied, "fresh": self.fresh}


def transfer_weights(source: Checkpoint, target: ViT) -> TransferReport:
    """Initialize a softmax-free model from a trained vanilla checkpoint.

    Every parameter present in both is copied; the sequence-normalization
    affine parameters (absent from a vanilla model) keep their identity
    initialization.
    """
    if isinstance(source, (str, Path)):
        source = Checkpoint.load(source)
    src_cfg, dst_cfg = source.config, target.config
    if src_cfg.mechanism is not Mechanism.VANILLA:
        raise CheckpointError(f"source checkpoint uses {src_cfg.mechanism.value}, expected vanilla")
    if dst_cfg.mechanism is not Mechanism.SEQNORM:
        raise CheckpointError(f"target model uses {dst_cfg.mechanism.value}, expected seqnorm")
    src_d, dst_d = src_cfg.to_dict(), dst_cfg.to_dict()
    diffs = [k for k in _TRANSFER_KEYS if src_d[k] != dst_d[k]]
    for k in ("inner_dim", "heads", "bias"):
        if src_d["attention"][k] != dst_d["attention"][k]:
            diffs.append(f"attention.{k}")
    if diffs:
        raise CheckpointError(
            "architectures differ beyond the attention mechanism: "
            + ", ".join(f"{k} ({_get(src_d, k)} vs {_get(dst_d, k)})" for k in diffs)
        )
    own = OrderedDict(target.named_parameters())
    unexpected = [n for n in source.params if n not in own]
    if unexpected:
        raise CheckpointError(f"source parameters unknown to target: {', '.join(unexpected)}")
    copied, fresh = [], []
    for name, p in own.items():
        if name in source.params:
            arr = source.params[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            copied.append(name)
        else:
            fresh.append(name)
    return TransferReport(copied, fresh)


def _get(d: dict, key: str):
    for part in key.split("."):
        d = d[part]
    return d
