import csv

import numpy as np
import pytest

from seqnorm_vit.attention import AttentionConfig
from seqnorm_vit.checkpoint import Checkpoint
from seqnorm_vit.data import SyntheticDatasetSpec, generate
from seqnorm_vit.model import ViT, ViTConfig
from seqnorm_vit.train import (
    METRIC_FIELDS,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    read_metrics,
    train,
)


def small_model(mechanism="seqnorm", seed=0, image=16):
    cfg = ViTConfig(input_kind="image2d", channels=1, image_size=(image, image), patch_size=(4, 4), model_dim=16,
                    attention=AttentionConfig(mechanism, 16, 16, 2), layers=2, mlp_dim=32)
    return ViT(cfg, seed=seed)


def data(n=200, noise=1.0, amplitude=2.0, seed=0, image=16):
    return generate(SyntheticDatasetSpec(image_size=(image, image), signal_size=6, num_samples=n,
                                         noise_std=noise, amplitude=amplitude, seed=seed))


def params(model):
    return [p.data.copy() for p in model.parameters()]


def test_zero_lr_keeps_parameters_bit_identical():
    model = small_model()
    before = params(model)
    train(model, data(), TrainConfig(epochs=1, lr=0.0))
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(before, model.parameters()))


def test_zero_lr_sgd_too():
    model = small_model("vanilla")
    before = params(model)
    train(model, data(), TrainConfig(epochs=1, lr=0.0, optimizer="sgd"))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_noiseless_task_is_solved_in_five_epochs():
    ds = data(n=400, noise=0.0, image=32)
    result = train(small_model(image=32), ds, TrainConfig(epochs=5, lr=1e-3))
    assert result.best_auroc == 1.0
    assert [r.epoch for r in result.history] == [1, 2, 3, 4, 5]


def test_best_checkpoint_matches_best_epoch():
    ds = data(n=200)
    model = small_model()
    result = train(model, ds, TrainConfig(epochs=3, lr=1e-3))
    aurocs = [r.val_auroc for r in result.history]
    assert result.best_auroc == max(aurocs)
    assert result.best_epoch == 1 + aurocs.index(max(aurocs))
    assert result.best.metadata["epoch"] == result.best_epoch
    # The stored weights reproduce the stored score.
    from seqnorm_vit.data import split

    _, val = split(ds, 0.2, 0)
    assert evaluate(result.best.build(), val) == result.best_auroc


def test_deterministic_repeat_is_identical(tmp_path):
    runs = []
    for name in ("a", "b"):
        model = small_model(seed=3)
        result = train(model, data(seed=3), TrainConfig(epochs=2, lr=1e-3, seed=3, augment=True),
                       run_dir=tmp_path / name)
        runs.append(result)
    assert [(r.train_loss, r.val_auroc) for r in runs[0].history] == [(r.train_loss, r.val_auroc) for r in runs[1].history]
    assert runs[0].best.sha256() == runs[1].best.sha256()
    for f in ("metrics.csv", "best.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seeds_differ():
    a = train(small_model(seed=0), data(), TrainConfig(epochs=1, lr=1e-3, seed=0))
    b = train(small_model(seed=0), data(), TrainConfig(epochs=1, lr=1e-3, seed=1))
    assert a.history[0].train_loss != b.history[0].train_loss


def test_run_dir_artifacts(tmp_path):
    train(small_model(), data(), TrainConfig(epochs=4, lr=1e-3, checkpoint_every=2), run_dir=tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_FIELDS and len(rows) == 5
    assert all(float(r[3]) == 0.0 for r in rows[1:])
    timing = list(csv.DictReader(open(tmp_path / "timing.csv")))
    assert len(timing) == 4 and all(float(r["seconds"]) > 0 for r in timing)
    assert sorted(p.name for p in tmp_path.glob("epoch_*.ckpt")) == ["epoch_002.ckpt", "epoch_004.ckpt"]
    best = Checkpoint.load(tmp_path / "best.ckpt")
    assert best.metadata["val_auroc"] == max(r.val_auroc for r in read_metrics(tmp_path / "metrics.csv"))


def test_non_deterministic_mode_logs_wall_time(tmp_path):
    train(small_model(), data(), TrainConfig(epochs=1, lr=1e-3, deterministic=False), run_dir=tmp_path)
    assert read_metrics(tmp_path / "metrics.csv")[0].seconds > 0
    assert not (tmp_path / "timing.csv").exists()


def test_divergence_is_reported():
    model = small_model("vanilla")
    for p in model.parameters():
        p.data = p.data * 1e30
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train(model, data(n=50), TrainConfig(epochs=1, lr=1e-3))


def test_token_bag_training_runs():
    ds = generate(SyntheticDatasetSpec(kind="token_bag", seq_len=12, min_seq_len=6, token_dim=5,
                                       signal_tokens=2, num_samples=60))
    cfg = ViTConfig(input_kind="tokens", token_dim=5, max_seq_len=12, model_dim=8,
                    attention=AttentionConfig("seqnorm", 8, 8, 2), layers=1, mlp_dim=8)
    result = train(ViT(cfg), ds, TrainConfig(epochs=1, lr=1e-3, batch_size=8))
    assert 0.0 <= result.best_auroc <= 1.0


@pytest.mark.parametrize("kw,msg", [
    (dict(epochs=0), "epochs"),
    (dict(lr=-1e-3), "lr"),
    (dict(batch_size=0), "batch_size"),
    (dict(optimizer="lamb"), "lamb"),
    (dict(val_fraction=1.0), "val_fraction"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        TrainConfig(**kw)


def test_config_round_trip_and_unknown_field():
    cfg = TrainConfig(epochs=3, betas=[0.8, 0.9])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig.from_dict({"warmup": 3})


def test_empty_dataset_rejected():
    ds = data(n=10).subset(np.array([], dtype=int))
    with pytest.raises(ValueError, match="empty"):
        train(small_model(), ds, TrainConfig(epochs=1))
