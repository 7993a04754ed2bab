"""Softmax-free, sequence-normalized linear attention in a small numpy ViT.

The package is layered bottom-up:

* ``autograd``: dense tensors with reverse-mode differentiation.
* ``attention``: vanilla softmax, sequence-normalized linear and SimA attention.
* ``model`` / ``checkpoint``: the ViT, its presets, serialization and weight transfer.
* ``data``: deterministic synthetic datasets and augmentation.
* ``metrics`` / ``optim`` / ``train``: loss, AUROC, optimizers, training loop.
* ``bench`` / ``gradcheck``: scaling benchmark and finite-difference checks.
"""

from .attention import (
    AttentionConfig,
    AttentionLayer,
    Mechanism,
    project_qkv,
    seq_normalize_affine,
    seqnorm_attention,
    sima_attention,
    vanilla_attention,
)
from .autograd import (
    GradientError,
    NumericError,
    ShapeError,
    Tensor,
    matmul,
    no_grad,
    precision,
    seq_stats,
    softmax,
)
from .bench import AllocProbe, BenchRecord, bench_scaling, emit_csv, fit_scaling_exponent, read_csv
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    TransferReport,
    load_checkpoint,
    save_checkpoint,
    transfer_weights,
)
from .data import (
    CounterRNG,
    Dataset,
    DatasetKind,
    SyntheticDatasetSpec,
    augment,
    generate,
    load_dataset,
    save_dataset,
    split,
)
from .metrics import UndefinedMetricError, auroc, cross_entropy
from .model import PRESETS, ConfigError, InputKind, ViT, ViTConfig, parameter_count, patchify, preset
from .optim import SGD, AdamW, adamw_step, sgd_step
from .train import TrainConfig, TrainingDivergedError, TrainResult, evaluate, train

__version__ = "0.1.0"

import types as _types

__all__ = sorted(
    name for name, obj in globals().items()
    if not name.startswith("_") and not isinstance(obj, _types.ModuleType)
)
