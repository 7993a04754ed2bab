"""Deterministic synthetic datasets and the augmentation pipeline.

Random numbers come from a counter-based generator so every value is a pure
function of ``(seed, stream, index, counter)``:

* ``splitmix64(z)``: ``z += 0x9E3779B97F4A7C15``;
  ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``; ``z ^ (z >> 31)``
  (all arithmetic mod 2**64).
* key = ``splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)``.
* the ``c``-th raw word of a stream is ``splitmix64(key + c * 0x9E3779B97F4A7C15)``.
* uniforms are ``(word >> 11) * 2**-53`` in [0, 1).
* normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (one normal per pair).

Stream ids are fixed small integers (see ``STREAMS``).
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAMS = {
    "label": 1,
    "noise": 2,
    "position": 3,
    "signal": 4,
    "length": 5,
    "augment": 6,
    "shuffle": 7,
    "split": 8,
    "direction": 9,
}


def splitmix64(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Stateless-by-construction random stream keyed by (seed, stream, index).

    Draws advance an internal counter, so repeated calls on one instance give
    fresh values while a new instance with the same key replays them.
    """

    def __init__(self, seed: int, stream: str | int, index: int = 0):
        sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
        key = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        key = splitmix64(key ^ np.uint64(sid))
        self.key = splitmix64(key ^ np.uint64(index & 0xFFFFFFFFFFFFFFFF))
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        c = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return splitmix64(self.key + c * _GOLDEN)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform((n, 2))
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        u = self.uniform(size)
        if size is None:
            return low + int(u * (high - low))
        return low + np.floor(u * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# -- dataset spec -----------------------------------------------------------------
class DatasetKind(str, enum.Enum):
    BRIGHT_SQUARE_2D = "bright_square_2d"
    BRIGHT_BLOB_3D = "bright_blob_3d"
    TOKEN_BAG = "token_bag"


@dataclass
class SyntheticDatasetSpec:
    """Recipe for a labeled toy dataset.

    Class 0 is pure Gaussian noise.  Class 1 adds ``amplitude`` on an
    axis-aligned square (2D) / cuboid (3D) of side ``signal_size`` at a random
    position, or, for ``token_bag``, adds ``amplitude`` times a fixed unit
    direction to ``signal_tokens`` random tokens of a ``[seq_len, token_dim]``
    sequence.  ``amplitude = 0`` gives an explicit null-signal dataset.
    """

    kind: DatasetKind = DatasetKind.BRIGHT_SQUARE_2D
    image_size: tuple[int, ...] = (64, 64)
    channels: int = 1
    num_samples: int = 2000
    positive_fraction: float = 0.5
    amplitude: float = 2.0
    noise_std: float = 1.0
    signal_size: int = 12
    seq_len: int = 64
    min_seq_len: int | None = None
    token_dim: int = 32
    signal_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.kind is DatasetKind.TOKEN_BAG:
            lo = self.min_seq_len or self.seq_len
            if not 1 <= lo <= self.seq_len:
                raise ValueError("need 1 <= min_seq_len <= seq_len")
            if not 1 <= self.signal_tokens <= lo:
                raise ValueError("signal_tokens must fit in the shortest sequence")
        else:
            rank = 2 if self.kind is DatasetKind.BRIGHT_SQUARE_2D else 3
            if len(self.image_size) != rank:
                raise ValueError(f"{self.kind.value} needs {rank} image extents")
            if not 1 <= self.signal_size <= min(self.image_size):
                raise ValueError("signal_size must fit inside the image")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticDatasetSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown data config field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray | None = None
    spec: SyntheticDatasetSpec | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        lengths = None if self.lengths is None else self.lengths[idx]
        return Dataset(self.inputs[idx], self.labels[idx], lengths, self.spec)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        if self.lengths is not None:
            h.update(self.lengths.astype("<i8").tobytes())
        return h.hexdigest()


def balanced_labels(n: int, positive_fraction: float, seed: int) -> np.ndarray:
    n_pos = int(round(n * positive_fraction))
    n_pos = min(max(n_pos, 1), n - 1) if n > 1 else n_pos
    order = CounterRNG(seed, "label").permutation(n)
    labels = np.zeros(n, dtype=np.int64)
    labels[order[:n_pos]] = 1
    return labels


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Materialize the dataset described by ``spec`` (float32, channel-last)."""
    n = spec.num_samples
    labels = balanced_labels(n, spec.positive_fraction, spec.seed)
    if spec.kind is DatasetKind.TOKEN_BAG:
        return _token_bag(spec, labels)
    shape = spec.image_size + (spec.channels,)
    inputs = np.empty((n,) + shape, dtype=np.float32)
    s = spec.signal_size
    for i in range(n):
        x = CounterRNG(spec.seed, "noise", i).normal(shape) * spec.noise_std
        if labels[i]:
            pos = CounterRNG(spec.seed, "position", i)
            corner = [pos.integers(0, extent - s + 1) for extent in spec.image_size]
            x[tuple(slice(c, c + s) for c in corner)] += spec.amplitude
        inputs[i] = x
    return Dataset(inputs, labels, None, spec)


def _token_bag(spec: SyntheticDatasetSpec, labels: np.ndarray) -> Dataset:
    n, dim = spec.num_samples, spec.token_dim
    direction = CounterRNG(spec.seed, "direction").normal(dim)
    direction /= np.linalg.norm(direction)
    lo = spec.min_seq_len or spec.seq_len
    inputs = np.zeros((n, spec.seq_len, dim), dtype=np.float32)
    lengths = np.empty(n, dtype=np.int64)
    for i in range(n):
        length = CounterRNG(spec.seed, "length", i).integers(lo, spec.seq_len + 1)
        x = CounterRNG(spec.seed, "noise", i).normal((length, dim)) * spec.noise_std
        if labels[i]:
            picks = CounterRNG(spec.seed, "signal", i).permutation(length)[: spec.signal_tokens]
            x[picks] += spec.amplitude * direction
        inputs[i, :length] = x
        lengths[i] = length
    if lo == spec.seq_len:
        lengths = None
    return Dataset(inputs, labels, lengths, spec)


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``1 - val_fraction`` share trains."""
    n = len(dataset)
    order = CounterRNG(seed, "split").permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


# -- augmentation ----------------------------------------------------------------------
def rotate2d(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate ``[H, W, C]`` about the image center, bilinear, zero fill.

    Positive angles turn the image clockwise as displayed with row 0 on top.

    Output pixel (r, c) samples the input at the inverse-rotated location;
    neighbours outside the image contribute zero.
    """
    h, w = image.shape[:2]
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cy, cc - cx
    src_r = cos * dy - sin * dx + cy
    src_c = sin * dy + cos * dx + cx
    r0, c0 = np.floor(src_r).astype(np.int64), np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    out = np.zeros(image.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            r, c = r0 + dr, c0 + dc
            weight = wr * wc
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w) & (weight != 0)
            out[ok] += weight[ok, None] * image[r[ok], c[ok]]
    return out.astype(image.dtype)


def flip(image: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(image, axis=axis).copy()


def augment(sample: np.ndarray, rng: CounterRNG, max_angle: float = 45.0) -> np.ndarray:
    """Random training augmentation for one channel-last image.

    2D: rotation by an angle uniform in [-max_angle, +max_angle], then a
    vertical (row-axis) flip with probability 1/2.  3D: an independent flip
    with probability 1/2 along each spatial axis.
    """
    if sample.ndim == 3:
        angle = (2.0 * rng.uniform() - 1.0) * max_angle
        out = rotate2d(sample, angle)
        if rng.uniform() < 0.5:
            out = flip(out, 0)
        return out
    if sample.ndim == 4:
        out = sample
        for axis in range(3):
            if rng.uniform() < 0.5:
                out = flip(out, axis)
        return out if out is not sample else sample.copy()
    raise ValueError(f"augment expects [H, W, C] or [D, H, W, C], got shape {sample.shape}")


def augment_batch(batch: np.ndarray, seed: int, epoch: int, indices) -> np.ndarray:
    """Augment each sample with a stream keyed by (seed, epoch, sample index)."""
    out = np.empty_like(batch)
    for j, idx in enumerate(indices):
        rng = CounterRNG(seed, "augment", (int(epoch) << 32) | int(idx))
        out[j] = augment(batch[j], rng)
    return out


# -- export / import ------------------------------------------------------------------
def save_dataset(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float32 inputs) and ``<path>.json``."""
    path = Path(path)
    bin_path, meta_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(dataset.inputs, dtype="<f4").tobytes())
    meta = {
        "shape": list(dataset.inputs.shape),
        "dtype": "f32",
        "labels": dataset.labels.tolist(),
        "lengths": None if dataset.lengths is None else dataset.lengths.tolist(),
        "spec": None if dataset.spec is None else dataset.spec.to_dict(),
        "sha256": dataset.checksum(),
    }
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return bin_path, meta_path


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    shape = tuple(meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path.with_suffix('.bin')}: expected {4 * int(np.prod(shape))} bytes, found {len(raw)}")
    inputs = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    lengths = None if meta.get("lengths") is None else np.asarray(meta["lengths"], dtype=np.int64)
    spec = None if meta.get("spec") is None else SyntheticDatasetSpec.from_dict(meta["spec"])
    ds = Dataset(inputs, np.asarray(meta["labels"], dtype=np.int64), lengths, spec)
    if meta.get("sha256") and ds.checksum() != meta["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    return ds
