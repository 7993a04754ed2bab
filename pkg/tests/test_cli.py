import csv
import hashlib
import json
import subprocess
import sys

import pytest

from seqnorm_vit.checkpoint import Checkpoint
from seqnorm_vit.cli import ENV_OUT, build_parser, main

FAST = ["--set", "model.image_size=[32,32]", "--set", "model.layers=2",
        "--set", "data.num_samples=80", "--set", "train.epochs=2", "--set", "train.lr=1e-3", "-q"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_dir(out):
    return next(line.split(": ", 1)[1] for line in out.splitlines() if line.startswith("run directory"))


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# -- parsing ---------------------------------------------------------------------
@pytest.mark.parametrize("command,flags", [
    ("train", ["--config", "--set", "--out", "--seed", "--deterministic", "--no-deterministic", "--quiet",
               "--data", "--init"]),
    ("eval", ["--checkpoint", "--data"]),
    ("bench", ["--mechanisms", "--seq", "--dim", "--heads", "--batch", "--reps", "--warmup", "--steps", "--budget"]),
    ("gradcheck", ["--mechanism", "--precision", "--skip-ops"]),
    ("transfer", ["--from", "--to-config"]),
    ("gen-data", ["--config", "--set", "--out", "--seed"]),
])
def test_help_lists_every_flag(command, flags):
    text = build_parser()._subparsers._group_actions[0].choices[command].format_help()
    for flag in flags:
        assert flag in text, flag


def test_top_level_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("train", "eval", "bench", "gradcheck", "transfer", "gen-data"):
        assert cmd in out


def test_invalid_flag_exits_nonzero_without_artifacts(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", str(tmp_path), "--bogus"])
    assert info.value.code == 2
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize("argv,needle", [
    (["train", "--set", "model.dropout=0.1"], "dropout"),
    (["train", "--set", "optim.lr=1"], "optim.lr"),
    (["train", "--set", "train.epochs=0"], "epochs"),
    (["train", "--set", "noequals"], "key=value"),
    (["train", "--set", "preset=ViT5D"], "ViT5D"),
    (["train", "--config", "/nonexistent/cfg.json"], "not found"),
    (["eval", "--checkpoint", "/nonexistent/x.ckpt"], "x.ckpt"),
    (["bench", "--reps", "2"], "reps"),
])
def test_bad_input_gives_one_line_error(tmp_path, capsys, argv, needle):
    code, out, err = run(capsys, *argv, "--out", str(tmp_path))
    assert code == 1
    assert err.startswith("error: ") and err.count("\n") == 1 and needle in err
    assert not list(tmp_path.iterdir())


def test_bad_json_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    code, _, err = run(capsys, "gen-data", "--config", str(cfg), "--out", str(tmp_path / "runs"))
    assert code == 1 and "invalid JSON" in err


# -- subcommands -------------------------------------------------------------------
def test_bench_three_by_three_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--mechanisms", "vanilla,seqnorm,sima", "--seq", "196,1024,4096",
                       "--dim", "64", "--heads", "4", "--reps", "3", "--warmup", "0", "--steps", "1",
                       "--out", str(tmp_path), "-q")
    assert code == 0
    rows = list(csv.DictReader(open(f"{run_dir(out)}/bench.csv")))
    assert len(rows) == 9
    assert {(r["mechanism"], r["N"]) for r in rows} == {(m, n) for m in ("vanilla", "seqnorm", "sima")
                                                          for n in ("196", "1024", "4096")}


def test_gradcheck_seqnorm_f64(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--mechanism", "seqnorm", "--precision", "f64", "--out", str(tmp_path), "-q")
    assert code == 0
    report = json.load(open(f"{run_dir(out)}/gradcheck.json"))
    assert report["passed"]
    assert max(r["max_rel_error"] for r in report["reports"]) <= 1e-6


def test_gen_data_train_eval_transfer_pipeline(tmp_path, capsys):
    out_root = str(tmp_path / "runs")
    code, out, _ = run(capsys, "gen-data", *FAST, "--out", out_root)
    assert code == 0
    data = f"{run_dir(out)}/dataset"

    code, out, _ = run(capsys, "train", *FAST, "--set", "model.mechanism=vanilla", "--data", data, "--out", out_root)
    assert code == 0
    vanilla_dir = run_dir(out)
    files = sorted(p.name for p in (tmp_path / "runs" / vanilla_dir.rsplit("/", 1)[1]).iterdir())
    assert files == ["best.ckpt", "config.json", "metrics.csv", "timing.csv"]

    code, out, _ = run(capsys, "eval", *FAST, "--checkpoint", f"{vanilla_dir}/best.ckpt", "--data", data,
                       "--out", out_root)
    assert code == 0 and 0.0 <= json.load(open(f"{run_dir(out)}/eval.json"))["auroc"] <= 1.0

    target = tmp_path / "seqnorm.json"
    target.write_text(json.dumps({"model": {"mechanism": "seqnorm", "image_size": [32, 32], "layers": 2}}))
    code, out, _ = run(capsys, "transfer", "--from", f"{vanilla_dir}/best.ckpt", "--to-config", str(target),
                       "--out", out_root, "-q")
    assert code == 0
    report = json.load(open(f"{run_dir(out)}/transfer.json"))
    assert len(report["fresh"]) == 6 * 2
    assert "12 fresh" in out
    assert Checkpoint.load(f"{run_dir(out)}/transferred.ckpt").config.mechanism.value == "seqnorm"

    code, out, _ = run(capsys, "train", *FAST, "--init", f"{vanilla_dir}/best.ckpt", "--data", data, "--out", out_root)
    assert code == 0
    assert len(json.load(open(f"{run_dir(out)}/transfer.json"))["fresh"]) == 12


def test_transfer_layer_mismatch_cleans_up(tmp_path, capsys):
    code, out, _ = run(capsys, "train", *FAST, "--set", "model.mechanism=vanilla", "--out", str(tmp_path / "a"))
    assert code == 0
    code, _, err = run(capsys, "transfer", "--from", f"{run_dir(out)}/best.ckpt", "--set", "model.image_size=[32,32]",
                       "--set", "model.layers=3", "--out", str(tmp_path / "b"))
    assert code == 1 and "layers" in err
    assert not (tmp_path / "b").exists() or not list((tmp_path / "b").iterdir())


def test_repeat_invocations_identical_checksums(tmp_path, capsys):
    digests = []
    for _ in range(2):
        code, out, _ = run(capsys, "train", *FAST, "--seed", "7", "--deterministic", "--out", str(tmp_path))
        assert code == 0
        d = run_dir(out)
        digests.append([digest(f"{d}/{f}") for f in ("best.ckpt", "metrics.csv", "config.json")])
    assert digests[0] == digests[1]
    names = sorted(p.name for p in tmp_path.iterdir())
    assert len(names) == 2 and all(n.startswith("train-") and "-seed7" in n for n in names)


def test_precedence_override_beats_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"num_samples": 30, "seed": 1}}))
    code, out, _ = run(capsys, "gen-data", "--config", str(cfg), "--set", "data.num_samples=40",
                       "--out", str(tmp_path), "-q")
    assert code == 0
    meta = json.load(open(f"{run_dir(out)}/dataset.json"))
    assert len(meta["labels"]) == 40 and meta["spec"]["seed"] == 1


def test_env_var_sets_output_root(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "env"))
    code, out, _ = run(capsys, "gen-data", "--set", "data.num_samples=10", "-q")
    assert code == 0 and run_dir(out).startswith(str(tmp_path / "env"))


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "seqnorm_vit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
