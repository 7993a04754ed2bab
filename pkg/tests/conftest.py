import functools
import time

import numpy as np
import pytest

from seqnorm_vit import (
    Checkpoint,
    SyntheticDatasetSpec,
    TrainConfig,
    ViT,
    generate,
    precision,
    preset,
    train,
    transfer_weights,
)
from seqnorm_vit.bench import bench_scaling

# Shared settings of the toy experiments (criteria 5 and 6).
TOY_SEEDS = (0, 1, 2)
TOY_EPOCHS = 20
TOY_LR = 1e-3

# Scaling grid of criterion 4.
BENCH_N = (256, 512, 1024, 2048, 4096, 8192)


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class ToyRuns:
    """Trains each (mechanism, seed) toy model once per session."""

    def __init__(self):
        self.seconds: dict[tuple, float] = {}

    def _timed(self, key, fn):
        t0 = time.perf_counter()
        result = fn()
        self.seconds[key] = time.perf_counter() - t0
        return result

    @functools.lru_cache(maxsize=None)
    def dataset(self, seed):
        return generate(SyntheticDatasetSpec(num_samples=2000, noise_std=1.0, amplitude=2.0, seed=seed))

    def config(self, seed):
        return TrainConfig(epochs=TOY_EPOCHS, lr=TOY_LR, seed=seed)

    @functools.lru_cache(maxsize=None)
    def scratch(self, mechanism, seed):
        model = ViT(preset("toy", mechanism), seed=seed)
        return self._timed((mechanism, seed), lambda: train(model, self.dataset(seed), self.config(seed)))

    @functools.lru_cache(maxsize=None)
    def transferred(self, seed):
        source: Checkpoint = self.scratch("vanilla", seed).best
        model = ViT(preset("toy", "seqnorm"), seed=seed)
        transfer_weights(source, model)
        return self._timed(("transfer", seed), lambda: train(model, self.dataset(seed), self.config(seed)))


@pytest.fixture(scope="session")
def toy_runs():
    return ToyRuns()


@pytest.fixture(scope="session")
def scaling_records():
    """The criterion-4 benchmark, run once and shared with the bench tests."""
    return bench_scaling(
        ["vanilla", "seqnorm", "sima"], BENCH_N, dim=512, heads=8, batch=1,
        reps=5, warmup=2, steps=1, deterministic=True,
    )


# -- acceptance summary --------------------------------------------------------------
# Filled by test_acceptance.py; printed at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
