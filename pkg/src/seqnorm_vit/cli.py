"""Command-line entry point: ``seqnorm-vit <subcommand> [flags]``.

Configuration is resolved as preset defaults, then the JSON ``--config``
file, then ``--set section.key=value`` overrides.  A config file holds up to
four top-level keys::

    {"preset": "toy",
     "model": {"mechanism": "seqnorm", "layers": 2},
     "train": {"epochs": 5, "lr": 0.001},
     "data":  {"num_samples": 500, "noise_std": 1.0}}

A file whose top level is a plain model config (as written to
``config.json`` by ``train``) is also accepted.  Inside ``model`` the
attention fields (``mechanism``, ``inner_dim``, ``heads``, ``eps``, ``bias``)
may be given flat.  Every artifact goes to ``<out>/<subcommand>-<UTC
timestamp>-seed<seed>/``, where ``<out>`` is ``--out``, else
``$SEQNORM_VIT_OUT``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import gradcheck
from .attention import AttentionConfig, Mechanism
from .bench import DEFAULT_ELEMENT_BUDGET, bench_scaling, emit_csv, emit_plot_data, fit_scaling_exponent
from .checkpoint import Checkpoint, transfer_weights
from .data import SyntheticDatasetSpec, generate, load_dataset, save_dataset
from .model import PRESETS, ConfigError, ViTConfig, build_model, preset
from .train import TrainConfig, TrainingDivergedError, deterministic, evaluate, train

ENV_OUT = "SEQNORM_VIT_OUT"
SECTIONS = ("preset", "model", "train", "data")
_ATTENTION_KEYS = tuple(f.name for f in dataclasses.fields(AttentionConfig) if f.name != "model_dim")


class UsageError(Exception):
    """A user-facing failure; reported as one line with a nonzero exit."""


# -- configuration ---------------------------------------------------------------
def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs: list[str] | None) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"override {pair!r} is not of the form key=value")
        if key == "preset":
            out["preset"] = {"": parse_value(value)}
            continue
        section, dot, field = key.partition(".")
        if not dot or section not in ("model", "train", "data") or not field:
            raise UsageError(f"unknown override key {key!r}; use model.<field>, train.<field>, data.<field> or preset")
        out[section][field] = parse_value(value)
    return out


def load_config_file(path) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    if doc and not set(doc) <= set(SECTIONS):
        # a bare model config, e.g. a run's config.json
        return {"model": doc}
    return doc


def _flat_model(d: dict[str, Any]) -> dict[str, Any]:
    d = dict(d)
    att = dict(d.pop("attention", {}) or {})
    for key in _ATTENTION_KEYS:
        if key in d:
            att[key] = d.pop(key)
    if att:
        d["attention"] = att
    return d


def resolve(args) -> dict[str, Any]:
    """Merge preset < file < overrides into validated config objects."""
    doc = load_config_file(args.config)
    over = parse_overrides(args.set)
    name = over["preset"].get("", doc.get("preset", "toy"))
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")

    model = preset(name).to_dict()
    for layer in (_flat_model(doc.get("model", {})), _flat_model(over["model"])):
        att = layer.pop("attention", None)
        model.update(layer)
        if att:
            model["attention"].update(att)
    model["attention"]["model_dim"] = model["model_dim"]
    given = set(doc.get("model", {})) | set(over["model"])
    if given & {"image_size", "patch_size"} and "max_seq_len" not in given and model["input_kind"] != "tokens":
        model["max_seq_len"] = None  # re-derive from the new patch grid
    try:
        model_cfg = ViTConfig.from_dict(model)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from None

    train_d = {**doc.get("train", {}), **over["train"]}
    data_d = {**doc.get("data", {}), **over["data"]}
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.deterministic is not None:
        train_d["deterministic"] = args.deterministic
    try:
        train_cfg = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None
    data_d.setdefault("seed", train_cfg.seed)
    data_d.setdefault("image_size", list(model_cfg.image_size))
    data_d.setdefault("channels", model_cfg.channels)
    try:
        data_cfg = SyntheticDatasetSpec.from_dict(data_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"data config: {exc}") from None
    return {"preset": name, "model": model_cfg, "train": train_cfg, "data": data_cfg}


# -- run directory ----------------------------------------------------------------
def output_root(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or "runs")


def make_run_dir(args, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = output_root(args) / f"{args.command}-{stamp}-seed{seed}"
    path, k = base, 1
    while path.exists():
        k += 1
        path = base.with_name(f"{base.name}-{k}")
    path.mkdir(parents=True)
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _dataset(args, cfg):
    if getattr(args, "data", None):
        try:
            return load_dataset(args.data)
        except FileNotFoundError as exc:
            raise UsageError(f"dataset not found: {exc.filename}") from None
    return generate(cfg["data"])


# -- subcommands --------------------------------------------------------------------
def cmd_gen_data(args, cfg, run_dir: Path) -> str:
    ds = generate(cfg["data"])
    save_dataset(ds, run_dir / "dataset")
    return f"dataset: {len(ds)} samples, sha256 {ds.checksum()}"


def cmd_train(args, cfg, run_dir: Path) -> str:
    tcfg = cfg["train"]
    model = build_model(cfg["model"], seed=tcfg.seed)
    if args.init:
        source = Checkpoint.load(args.init)
        if source.config.mechanism is cfg["model"].mechanism:
            source.restore(model)
        else:
            report = transfer_weights(source, model)
            write_json(run_dir / "transfer.json", report.to_dict())
    write_json(run_dir / "config.json", {
        "preset": cfg["preset"], "model": cfg["model"].to_dict(),
        "train": tcfg.to_dict(), "data": cfg["data"].to_dict(),
    })
    result = train(model, _dataset(args, cfg), tcfg, run_dir=run_dir)
    return f"best val_auroc {result.best_auroc:.4f} at epoch {result.best_epoch}; checkpoint {run_dir / 'best.ckpt'}"


def cmd_eval(args, cfg, run_dir: Path) -> str:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build()
    ds = _dataset(args, cfg)
    with deterministic(cfg["train"].deterministic):
        score = evaluate(model, ds, cfg["train"].eval_batch_size)
    write_json(run_dir / "eval.json", {
        "checkpoint": str(args.checkpoint), "checkpoint_sha256": ckpt.sha256(),
        "dataset_sha256": ds.checksum(), "num_samples": len(ds), "auroc": score,
    })
    return f"auroc {score:.6f} on {len(ds)} samples"


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench(args, cfg, run_dir: Path) -> str:
    det = True if args.deterministic is None else args.deterministic
    seed = 0 if args.seed is None else args.seed
    records = bench_scaling(
        args.mechanisms, args.seq, dim=args.dim, heads=args.heads, batch=args.batch,
        reps=args.reps, warmup=args.warmup, steps=args.steps, deterministic=det,
        element_budget=args.budget or None, seed=seed,
    )
    emit_csv(records, run_dir / "bench.csv")
    emit_plot_data(records, run_dir / "plot_data.csv")
    fits = {}
    for mech in args.mechanisms:
        rows = [r for r in records if r.mechanism == mech]
        try:
            fit = fit_scaling_exponent(rows)
            fits[mech] = {"slope": fit.slope, "r2": fit.r2}
        except ValueError:
            pass
    if fits:
        write_json(run_dir / "fits.json", fits)
    slopes = ", ".join(f"{m} slope {f['slope']:.2f}" for m, f in fits.items())
    return f"{len(records)} records in {run_dir / 'bench.csv'}" + (f"; {slopes}" if slopes else "")


def cmd_gradcheck(args, cfg, run_dir: Path) -> tuple[str, bool]:
    seed = 0 if args.seed is None else args.seed
    reports = []
    if not args.skip_ops:
        reports += [gradcheck.check_op(name, seed, args.precision) for name in gradcheck.OP_CASES]
    reports += [gradcheck.check_mechanism(m, seed, prec=args.precision) for m in args.mechanism]
    passed = all(r.passed for r in reports)
    write_json(run_dir / "gradcheck.json", {
        "precision": args.precision, "seed": seed, "passed": passed,
        "reports": [r.to_dict() for r in reports],
    })
    worst = max(reports, key=lambda r: r.max_error)
    n_fail = sum(not r.passed for r in reports)
    msg = (f"{len(reports) - n_fail}/{len(reports)} passed; max rel. error {worst.max_error:.3g} "
           f"({worst.subject}), tolerance {worst.tolerance:g}")
    return msg, passed


def cmd_transfer(args, cfg, run_dir: Path) -> str:
    try:
        source = Checkpoint.load(getattr(args, "from"))
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {exc.filename}") from None
    seed = 0 if args.seed is None else args.seed
    target = build_model(cfg["model"], seed=seed)
    report = transfer_weights(source, target)
    Checkpoint.from_model(target, transferred_from=source.sha256()).save(run_dir / "transferred.ckpt")
    write_json(run_dir / "transfer.json", report.to_dict())
    return (f"copied {len(report.copied)} parameters, {len(report.fresh)} fresh: "
            + ", ".join(report.fresh))


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
    "gradcheck": cmd_gradcheck, "transfer": cmd_transfer, "gen-data": cmd_gen_data,
}


# -- parser ---------------------------------------------------------------------------
def _mechanisms(text: str) -> list[str]:
    try:
        return [Mechanism.parse(t).value for t in text.split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqnorm-vit",
        description="Train, evaluate, benchmark and verify softmax-free sequence-normalized ViTs.",
    )
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", metavar="PATH", help="JSON config file")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override, e.g. model.mechanism=vanilla or train.lr=1e-3 (repeatable)")
    g.add_argument("--out", metavar="DIR", help=f"output root (default ${ENV_OUT} or ./runs)")
    g.add_argument("--seed", type=int, help="random seed (overrides train.seed)")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded BLAS and time-free metrics (default: on)")
    g.add_argument("-q", "--quiet", action="store_true", help="only print the summary line")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    p = sub.add_parser("train", parents=[common], help="train a model on a synthetic dataset")
    p.add_argument("--data", metavar="PATH", help="dataset written by gen-data (default: generate from config)")
    p.add_argument("--init", metavar="CKPT", help="initial weights; a vanilla checkpoint is transferred")

    p = sub.add_parser("eval", parents=[common], help="AUROC of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--data", metavar="PATH", help="dataset written by gen-data (default: generate from config)")

    p = sub.add_parser("bench", parents=[common], help="time/memory scaling benchmark")
    p.add_argument("--mechanisms", type=_mechanisms, default=["vanilla", "seqnorm", "sima"], metavar="LIST")
    p.add_argument("--seq", type=_int_list, default=[256, 512, 1024, 2048, 4096, 8192], metavar="LIST",
                   help="comma-separated sequence lengths")
    p.add_argument("--dim", type=int, default=512, help="inner dimension D")
    p.add_argument("--heads", type=int, default=8, help="heads J")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=5, help="timed repetitions (>= 3)")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--steps", type=int, default=10, help="forward+backward passes per repetition")
    p.add_argument("--budget", type=int, default=DEFAULT_ELEMENT_BUDGET,
                   help="max elements of one vanilla score buffer; 0 disables")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--mechanism", type=_mechanisms, default=["vanilla", "seqnorm", "sima"], metavar="LIST")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--skip-ops", action="store_true", help="only check whole models")

    p = sub.add_parser("transfer", parents=[common], help="initialize a seqnorm model from a vanilla checkpoint")
    p.add_argument("--from", required=True, metavar="CKPT", help="trained vanilla checkpoint")
    p.add_argument("--to-config", metavar="PATH", help="target model config (JSON); same as --config")

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "transfer" and args.to_config:
        if args.config:
            parser.error("give either --config or --to-config, not both")
        args.config = args.to_config
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    run_dir = None
    try:
        cfg = resolve(args)
        if args.command == "bench" and (min(args.seq) < 1 or args.reps < 3):
            raise UsageError("sequence lengths must be >= 1 and --reps >= 3")
        run_dir = make_run_dir(args, cfg["train"].seed)
        result = COMMANDS[args.command](args, cfg, run_dir)
    except (UsageError, ValueError, OSError, MemoryError, FloatingPointError, TrainingDivergedError) as exc:
        if run_dir is not None:
            shutil.rmtree(run_dir, ignore_errors=True)
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    msg, ok = result if isinstance(result, tuple) else (result, True)
    print(f"{msg}\nrun directory: {run_dir}")
    return 0 if ok else 1


def _one_line(exc: BaseException) -> str:
    text = str(exc) or type(exc).__name__
    return " ".join(text.split())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
