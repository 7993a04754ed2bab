"""Sequence-length scaling benchmark for the three attention mechanisms.

Time is the median wall clock of one forward+backward pass through the
attention core (Q, K, V given).  Memory is the peak number of live floating-point
elements allocated by graph operations, counted by :class:`AllocProbe`.
"""

from __future__ import annotations

import csv
import math
import time
import weakref
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import linregress

from . import autograd as ag
from .attention import AttentionConfig, AttentionLayer, Mechanism, attention
from .autograd import Tensor
from .train import deterministic as deterministic_mode

CSV_FIELDS = ("mechanism", "N", "D", "J", "batch", "reps", "median_seconds", "peak_elements", "status")
OK = "ok"
EXCEEDED = "exceeded_budget"

# one [B, J, N, N] buffer is 2**28 floats (1 GiB in float32) at this budget
DEFAULT_ELEMENT_BUDGET = 2**28


class AllocProbe:
    """Counts live elements of tensors created by graph ops while active.

    An element is counted from the moment an op allocates its output until
    that tensor is garbage collected.  ``allocations`` logs (op, shape) for
    every counted allocation.
    """

    def __init__(self):
        self.running = 0
        self.peak = 0
        self.allocations: list[tuple[str, tuple[int, ...]]] = []
        self._ctx = None

    def reset(self) -> None:
        self.running = self.peak = 0
        self.allocations = []

    def _track(self, tensor: Tensor, op: str) -> None:
        n = tensor.size
        self.running += n
        self.peak = max(self.peak, self.running)
        self.allocations.append((op, tensor.shape))
        weakref.finalize(tensor, self._release, n)

    def _release(self, n: int) -> None:
        self.running -= n

    def __enter__(self) -> "AllocProbe":
        self._ctx = ag.allocation_hook(self._track)
        self._ctx.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        self._ctx.__exit__(*exc)
        self._ctx = None

    def largest(self, op: str | None = None) -> int:
        sizes = [math.prod(s) for o, s in self.allocations if op is None or o == op]
        return max(sizes, default=0)

    def total(self, op: str) -> int:
        return sum(math.prod(s) for o, s in self.allocations if o == op)


@dataclass
class BenchRecord:
    mechanism: str
    N: int
    D: int
    J: int
    batch: int
    reps: int
    median_seconds: float | None
    peak_elements: int | None
    status: str = OK
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def row(self) -> list:
        return [
            self.mechanism, self.N, self.D, self.J, self.batch, self.reps,
            "" if self.median_seconds is None else repr(self.median_seconds),
            "" if self.peak_elements is None else self.peak_elements,
            self.status,
        ]


def predicted_peak(mechanism, n: int, dim: int, heads: int, batch: int = 1) -> int:
    """Closed-form probe peak for one forward pass of :func:`attention`.

    Mirrors the op sequence of each mechanism: every op output that owns
    memory stays alive in the graph until backward, so the forward peak is
    the sum of all counted allocations.  Exact for N, J, D/J >= 2; with a
    unit extent numpy merges the heads as a view and the last term vanishes.
    """
    mech = Mechanism.parse(mechanism)
    bnd, hd = batch * n * dim, dim // heads
    if mech is Mechanism.VANILLA:
        # scaled Q, scores, softmax weights, weights @ V, merged heads
        return 2 * batch * heads * n * n + 3 * bnd
    if mech is Mechanism.SEQNORM:
        # 3 x (normalize, *gamma, +beta), K^T V, state / N, Q @ state, merge
        return 9 * bnd + 2 * batch * heads * hd * hd + 2 * bnd
    # 2 x l1 normalization, K^T V, Q @ state, merge
    return 2 * bnd + batch * heads * hd * hd + 2 * bnd


def _inputs(mech: Mechanism, n: int, dim: int, heads: int, batch: int, seed: int, dtype):
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.standard_normal((batch, n, dim)).astype(dtype), requires_grad=True) for _ in range(3))
    cfg = AttentionConfig(mech, model_dim=dim, inner_dim=dim, heads=heads)
    layer = AttentionLayer(cfg, rng, dtype=dtype)
    return q, k, v, layer


def _step(q, k, v, layer) -> None:
    out = attention(q, k, v, layer)
    loss = out.sum()
    loss.backward()
    for t in (q, k, v, *layer.parameters()):
        t.grad = None


def measure_peak(mechanism, n: int, dim: int, heads: int, batch: int = 1, dtype=np.float32, seed: int = 0) -> AllocProbe:
    mech = Mechanism.parse(mechanism)
    q, k, v, layer = _inputs(mech, n, dim, heads, batch, seed, dtype)
    with AllocProbe() as probe:
        out = attention(q, k, v, layer)
        del out
    return probe


def bench_scaling(
    mechanisms: Iterable,
    n_list: Sequence[int],
    dim: int = 512,
    heads: int = 8,
    batch: int = 1,
    reps: int = 5,
    warmup: int = 2,
    steps: int = 10,
    deterministic: bool = True,
    element_budget: int | None = DEFAULT_ELEMENT_BUDGET,
    dtype=np.float32,
    seed: int = 0,
) -> list[BenchRecord]:
    """Median forward+backward time and probe peak for each (mechanism, N).

    Each timed repetition runs ``steps`` forward+backward passes and records
    their mean; ``median_seconds`` is the median of those per-step means.  A vanilla
    configuration whose ``[B, J, N, N]`` score buffer exceeds
    ``element_budget`` is not run and yields an ``exceeded_budget`` row.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if steps < 1 or warmup < 0:
        raise ValueError("steps must be >= 1 and warmup >= 0")
    records = []
    with deterministic_mode(deterministic):
        for mechanism in mechanisms:
            mech = Mechanism.parse(mechanism)
            for n in n_list:
                if n < 1:
                    raise ValueError("sequence lengths must be >= 1")
                if (
                    mech is Mechanism.VANILLA
                    and element_budget is not None
                    and batch * heads * n * n > element_budget
                ):
                    records.append(BenchRecord(mech.value, n, dim, heads, batch, reps, None, None, EXCEEDED))
                    continue
                try:
                    records.append(_bench_one(mech, n, dim, heads, batch, reps, warmup, steps, dtype, seed))
                except MemoryError:
                    records.append(BenchRecord(mech.value, n, dim, heads, batch, reps, None, None, EXCEEDED))
    return records


def _bench_one(mech, n, dim, heads, batch, reps, warmup, steps, dtype, seed) -> BenchRecord:
    q, k, v, layer = _inputs(mech, n, dim, heads, batch, seed, dtype)
    peak = measure_peak(mech, n, dim, heads, batch, dtype, seed).peak
    for _ in range(warmup):
        _step(q, k, v, layer)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(steps):
            _step(q, k, v, layer)
        times.append((time.perf_counter() - t0) / steps)
    return BenchRecord(mech.value, n, dim, heads, batch, reps, float(np.median(times)), int(peak))


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r2: float


def fit_scaling_exponent(records: Sequence[BenchRecord] | Sequence[tuple[float, float]]) -> ScalingFit:
    """Least-squares slope of log(time) against log(N).

    Accepts BenchRecords of one mechanism (budget-exceeded rows are skipped)
    or plain ``(N, seconds)`` pairs.  Needs at least 4 distinct N spanning a
    16x range.
    """
    pairs = []
    for r in records:
        if isinstance(r, BenchRecord):
            if r.status != OK:
                continue
            pairs.append((r.N, r.median_seconds))
        else:
            pairs.append((float(r[0]), float(r[1])))
    mechs = {r.mechanism for r in records if isinstance(r, BenchRecord)}
    if len(mechs) > 1:
        raise ValueError(f"records mix mechanisms: {sorted(mechs)}")
    ns = sorted({n for n, _ in pairs})
    if len(ns) < 4 or ns[-1] < 16 * ns[0]:
        raise ValueError(f"need >= 4 distinct N spanning >= 16x, got {ns}")
    x = np.log([n for n, _ in pairs])
    y = np.log([t for _, t in pairs])
    fit = linregress(x, y)
    return ScalingFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2))


def emit_csv(records: Sequence[BenchRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow(r.row())
    return path


def read_csv(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                BenchRecord(
                    row["mechanism"], int(row["N"]), int(row["D"]), int(row["J"]), int(row["batch"]),
                    int(row["reps"]),
                    float(row["median_seconds"]) if row["median_seconds"] else None,
                    int(row["peak_elements"]) if row["peak_elements"] else None,
                    row["status"],
                )
            )
    return out


def emit_plot_data(records: Sequence[BenchRecord], path) -> Path:
    """Companion ``mechanism,N,seconds`` file for external plotting."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("mechanism", "N", "seconds"))
        for r in records:
            if r.status == OK:
                w.writerow((r.mechanism, r.N, repr(r.median_seconds)))
    return path
