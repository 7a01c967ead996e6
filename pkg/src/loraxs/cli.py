"""Command-line interface: ``loraxs <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime or integrity failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import METHODS, ModelSpec, count_params, param_ratio, storage_budget
from .adapter import DEFAULT_ALPHA, DEFAULT_SIGMA, init_loraxs_random, init_loraxs_svd, merge
from .exceptions import LoraXsError, ParameterError
from .experiments import (
    DEFAULT_ABLATION_CONFIG,
    TASK_KINDS,
    TaskSpec,
    gen_task,
    records_to_csv,
    run_ablation,
    summarize,
    summary_table,
    summary_to_csv,
)
from .linalg import DEFAULT_N_ITER, read_matrix_text, truncated_svd
from .registry import (
    REGISTRY_ENV,
    WEIGHTS_MAGIC,
    Registry,
    attach_checkpoint,
    load_checkpoint,
    load_weights,
    save_checkpoint,
    save_weights,
)
from .training import Dataset, Layer, LinearStack, TrainConfig, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _nonneg_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _init_list(text):
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in ("svd", "random")]
    if not values or bad:
        raise argparse.ArgumentTypeError(f"init kinds must be svd and/or random, got {text!r}")
    return values


# --------------------------------------------------------------------------- output


def _emit(rows: list[dict], fmt: str, out) -> None:
    if fmt == "json":
        json.dump(rows if len(rows) != 1 else rows[0], out, indent=2)
        out.write("\n")
    elif fmt == "csv":
        writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    else:
        keys = list(rows[0])
        cells = [[str(r[k]) for k in keys] for r in rows]
        widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
        out.write("  ".join(k.ljust(w) for k, w in zip(keys, widths)).rstrip() + "\n")
        for c in cells:
            out.write("  ".join(v.ljust(w) for v, w in zip(c, widths)).rstrip() + "\n")


def _add_format(p):
    p.add_argument("--format", choices=("table", "csv", "json"), default="table", help="output encoding")


# --------------------------------------------------------------------------- file helpers


def _read_matrices(path) -> dict[str, np.ndarray]:
    """Named matrices from an LXSW weight file, or one matrix ``weight`` from a text file."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(len(WEIGHTS_MAGIC))
    if head == WEIGHTS_MAGIC:
        return load_weights(path)
    return {"weight": read_matrix_text(path)}


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _select(weights: dict, names: str | None, flag: str) -> dict:
    if not names:
        return weights
    wanted = [n.strip() for n in names.split(",") if n.strip()]
    missing = [n for n in wanted if n not in weights]
    if missing:
        raise LoraXsError(f"{flag}: no matrices named {', '.join(missing)}")
    return {n: weights[n] for n in wanted}


# --------------------------------------------------------------------------- commands


def cmd_count(args, out) -> int:
    spec = ModelSpec(args.layers, args.modules, args.hidden, args.rank, args.bytes_per_param, args.out_dim)
    methods = METHODS if args.method == "all" else (args.method,)
    if len(methods) == 1 and args.format == "table":
        out.write(f"{count_params(methods[0], spec)}\n")
        return EXIT_OK
    rows = [
        {"method": m, "params": count_params(m, spec), "ratio_vs_loraxs": param_ratio(m, "loraxs", spec)}
        for m in methods
    ]
    _emit(rows, args.format, out)
    return EXIT_OK


def cmd_budget(args, out) -> int:
    if args.params is not None:
        params, method = args.params, None
    else:
        missing = [f for f in ("method", "layers", "modules", "hidden", "rank") if getattr(args, f) is None]
        if missing:
            raise UsageError("budget needs --params or all of --method --layers --modules --hidden --rank")
        spec = ModelSpec(args.layers, args.modules, args.hidden, args.rank, args.bytes_per_param)
        params, method = count_params(args.method, spec), args.method
    report = storage_budget(params, args.bytes_per_param, args.models, method)
    if args.format == "table":
        out.write(f"params:          {report.params}\n")
        out.write(f"per checkpoint:  {report.bytes_per_checkpoint} B = {report.checkpoint_binary}\n")
        out.write(f"models:          {report.n_models}\n")
        out.write(
            f"fleet:           {report.fleet_bytes} B = {report.fleet_binary} = {report.fleet_decimal}"
            f" (quoted as {report.n_models} x {report.checkpoint_binary} = {report.fleet_quoted})\n"
        )
    else:
        _emit([report.as_row()], args.format, out)
    return EXIT_OK


def cmd_svd(args, out) -> int:
    weights = _read_matrices(args.weights)
    name = args.name or next(iter(weights))
    if name not in weights:
        raise LoraXsError(f"--name: no matrix {name!r} in {args.weights}")
    f = truncated_svd(weights[name], args.rank, args.n_iter, args.seed)
    save_weights(
        args.out,
        {"U": f.U, "S": f.S.reshape(1, -1), "V": f.V},
        meta={"source": str(args.weights), "name": name, "rank": args.rank, "n_iter": args.n_iter, "seed": args.seed},
    )
    _emit([{"index": i, "singular_value": repr(float(s))} for i, s in enumerate(f.S)], args.format, out)
    return EXIT_OK


def cmd_init(args, out) -> int:
    weights = _select(_read_matrices(args.weights), args.modules, "--modules")
    adapters = {}
    for i, (name, w) in enumerate(weights.items()):
        if args.init == "svd":
            adapters[name] = init_loraxs_svd(
                w, args.rank, args.alpha, args.sigma, svd_seed=args.svd_seed, r_seed=args.seed + i, n_iter=args.n_iter
            )
        else:
            adapters[name] = init_loraxs_random(w.shape[0], w.shape[1], args.rank, args.alpha, args.sigma, args.seed + i)
    base_id = args.base_id or _file_digest(args.weights)
    ckpt_id = save_checkpoint(
        adapters, args.out, base_model_id=base_id, storage_dtype=args.dtype, self_contained=args.self_contained
    )
    _emit([{"checkpoint_id": ckpt_id, "modules": len(adapters), "path": str(args.out)}], args.format, out)
    return EXIT_OK


def _read_config(path) -> tuple[dict, dict]:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    known = {"train", "model"}
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise UsageError(f"{path}: unknown sections {', '.join(unknown)}")
    train_opts = dict(parser["train"]) if parser.has_section("train") else {}
    model_opts = dict(parser["model"]) if parser.has_section("model") else {}
    bad = set(model_opts) - {"activation", "head", "head_trainable"}
    if bad:
        raise UsageError(f"{path}: unknown [model] keys {', '.join(sorted(bad))}")
    return train_opts, model_opts


def _dataset_from(path, head: str) -> Dataset:
    data = load_weights(path)
    if "x" not in data or "y" not in data:
        raise LoraXsError(f"{path}: dataset files need matrices 'x' and 'y'")
    y = data["y"]
    if head == "softmax_cross_entropy":
        y = y.ravel().astype(np.int64)
    return Dataset(data["x"], y)


def _build_stack(weights: dict, adapters: dict, activation: str, head: str, head_trainable: bool) -> LinearStack:
    names = list(weights)
    layers = [
        Layer(weights[n], adapters.get(n), activation if i < len(names) - 1 else "none") for i, n in enumerate(names)
    ]
    return LinearStack(layers, head=head, head_trainable=head_trainable)


def cmd_train(args, out) -> int:
    train_opts, model_opts = ({}, {}) if args.config is None else _read_config(args.config)
    overrides = {
        "adapter_lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "warmup_ratio": args.warmup_ratio,
        "scheduler": args.scheduler,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
    }
    train_opts.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = TrainConfig.from_mapping(train_opts)
    except (LoraXsError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc
    head = model_opts.get("head", "mse")
    activation = model_opts.get("activation", "none")
    head_trainable = model_opts.get("head_trainable", "false").lower() in ("1", "true", "yes")

    weights = _read_matrices(args.weights)
    ckpt = load_checkpoint(args.adapters)
    adapters = attach_checkpoint(ckpt, {n: w for n, w in weights.items() if n in ckpt.module_names})
    model = _build_stack(weights, adapters, activation, head, head_trainable)
    frozen_before = model.frozen_digest()
    dataset = _dataset_from(args.data, head)
    eval_data = _dataset_from(args.eval_data, head) if args.eval_data else None

    if args.log:
        with open(args.log, "w", encoding="utf-8", newline="") as log:
            run = train(model, dataset, config, eval_data, log=log)
    else:
        run = train(model, dataset, config, eval_data)
    if model.frozen_digest() != frozen_before:
        raise LoraXsError("frozen parameters changed during training")

    meta = {"trained": True, "train_config": config.to_dict(), "source_checkpoint": ckpt.checkpoint_id}
    ckpt_id = save_checkpoint(
        adapters,
        args.out,
        base_model_id=ckpt.base_model_id,
        storage_dtype=ckpt.storage_dtype,
        self_contained=ckpt.self_contained,
        meta=meta,
    )
    rows = []
    for e, loss in enumerate(run.loss_by_epoch):
        row = {"epoch": e + 1, "train_loss": repr(loss)}
        if run.eval_loss_by_epoch:
            row["eval_loss"] = repr(run.eval_loss_by_epoch[e])
        rows.append(row)
    if rows:
        _emit(rows, args.format, out)
    sys.stderr.write(f"checkpoint {ckpt_id} written to {args.out}\n")
    return EXIT_OK


def cmd_merge(args, out) -> int:
    weights = _read_matrices(args.weights)
    ckpt = load_checkpoint(args.adapters)
    adapters = attach_checkpoint(ckpt, {n: w for n, w in weights.items() if n in ckpt.module_names})
    merged = {n: (merge(w, adapters[n]) if n in adapters else w) for n, w in weights.items()}
    save_weights(args.out, merged, meta={"merged_checkpoint": ckpt.checkpoint_id})
    _emit([{"module": n, "merged": n in adapters} for n in merged], args.format, out)
    return EXIT_OK


def cmd_task(args, out) -> int:
    spec = TaskSpec(
        kind=args.kind,
        n_in=args.n_in,
        n_out=args.n_out,
        rank_star=args.rank_star,
        noise_std=args.noise,
        n_samples=args.samples,
        seed=args.seed,
    )
    task = gen_task(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(out_dir / "weights.lxsw", {f"layer{i}": w for i, w in enumerate(task.base_weights)}, meta={"task": args.kind})
    for name, ds in (("train", task.train), ("eval", task.eval)):
        y = ds.y.reshape(1, -1).astype(np.float64) if ds.is_classification else ds.y
        save_weights(out_dir / f"{name}.lxsw", {"x": ds.x, "y": y})
    _emit([{"file": str(out_dir / f)} for f in ("weights.lxsw", "train.lxsw", "eval.lxsw")], args.format, out)
    return EXIT_OK


def cmd_ablate(args, out) -> int:
    spec = TaskSpec(
        kind=args.kind,
        n_in=args.n_in,
        n_out=args.n_out,
        rank_star=args.rank_star,
        noise_std=args.noise,
        n_samples=args.samples,
        seed=args.task_seed,
    )
    task = gen_task(spec)
    base = DEFAULT_ABLATION_CONFIG.to_dict()
    overrides = {"epochs": args.epochs, "adapter_lr": args.lr, "batch_size": args.batch_size}
    base.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig(**base)
    seeds = range(args.seed, args.seed + args.seeds)
    jobs = args.jobs or os.cpu_count() or 1
    records = run_ablation(task, args.ranks, args.inits, seeds, config, alpha=args.alpha, sigma=args.sigma, jobs=jobs)
    rows = summarize(records)
    if args.records:
        with open(args.records, "w", encoding="utf-8", newline="") as fh:
            records_to_csv(records, fh)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8", newline="") as fh:
            summary_to_csv(rows, fh)
    if args.format == "csv":
        summary_to_csv(rows, out)
    elif args.format == "json":
        json.dump([r.__dict__ for r in rows], out, indent=2)
        out.write("\n")
    else:
        out.write(summary_table(rows) + "\n")
    return EXIT_OK


def cmd_registry(args, out) -> int:
    reg = Registry(args.root)
    if args.action == "init":
        Registry.create(reg.root)
        out.write(f"initialized {reg.root}\n")
        return EXIT_OK
    if args.action == "add":
        out.write(reg.add(args.path) + "\n")
        return EXIT_OK
    if args.action == "ls":
        entries = reg.list()
        if entries:
            _emit([e.__dict__ for e in entries], args.format, out)
        elif args.format == "json":
            out.write("[]\n")
        return EXIT_OK
    if args.action == "verify":
        results = reg.verify()
        failures = [r for r in results if not r.ok]
        if results:
            _emit([{"checkpoint_id": r.checkpoint_id, "ok": r.ok, "reason": r.reason} for r in results], args.format, out)
        sys.stderr.write(f"{len(results) - len(failures)} ok, {len(failures)} failed\n")
        return EXIT_FAILURE if failures else EXIT_OK
    if args.action == "gc":
        stray = reg.gc(dry_run=not args.delete)
        verb = "removed" if args.delete else "would remove"
        for p in stray:
            out.write(f"{verb} {p}\n")
        return EXIT_OK
    raise UsageError(f"unknown registry action {args.action!r}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loraxs", description="LoRA-XS adapters: build, train, merge, account.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="trainable parameters for a model spec")
    p.add_argument("--method", choices=(*METHODS, "all"), default="loraxs")
    p.add_argument("--layers", type=_positive_int, required=True)
    p.add_argument("--modules", type=_positive_int, required=True, help="adapted matrices per layer")
    p.add_argument("--hidden", type=_positive_int, required=True)
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--out-dim", type=_positive_int, default=None, help="rows of rectangular modules")
    p.add_argument("--bytes-per-param", type=_positive_int, default=2)
    _add_format(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("budget", help="checkpoint and fleet storage")
    p.add_argument("--params", type=_positive_int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--layers", type=_positive_int)
    p.add_argument("--modules", type=_positive_int)
    p.add_argument("--hidden", type=_positive_int)
    p.add_argument("--rank", type=_positive_int)
    p.add_argument("--bytes-per-param", type=_positive_int, default=2)
    p.add_argument("--models", type=_positive_int, default=1)
    _add_format(p)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("svd", help="randomized truncated SVD of a weight file")
    p.add_argument("--weights", required=True, help="LXSW weight file or whitespace text matrix")
    p.add_argument("--name", help="matrix to factorize (default: first)")
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--n-iter", type=_nonneg_int, default=DEFAULT_N_ITER)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out", required=True, help="factors file (LXSW with U, S, V)")
    _add_format(p)
    p.set_defaults(func=cmd_svd)

    p = sub.add_parser("init", help="build adapters and write a checkpoint")
    p.add_argument("--weights", required=True)
    p.add_argument("--modules", help="comma-separated matrix names (default: all)")
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--alpha", type=_positive_float, default=DEFAULT_ALPHA)
    p.add_argument("--sigma", type=_nonneg_float, default=DEFAULT_SIGMA)
    p.add_argument("--init", choices=("svd", "random"), default="svd")
    p.add_argument("--svd-seed", type=_nonneg_int, default=0)
    p.add_argument("--n-iter", type=_nonneg_int, default=DEFAULT_N_ITER)
    p.add_argument("--seed", type=_nonneg_int, default=0, help="seed for R (and random A/B)")
    p.add_argument("--base-id", help="base model id (default: weight file SHA-256)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--self-contained", action="store_true", help="also embed A and B")
    p.add_argument("--out", required=True)
    _add_format(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train adapter latents")
    p.add_argument("--config", help="INI file with [train] and [model] sections")
    p.add_argument("--weights", required=True)
    p.add_argument("--adapters", required=True, help="input checkpoint")
    p.add_argument("--data", required=True, help="LXSW file with x (n x N) and y")
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="per-step CSV log")
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--warmup-ratio", type=_nonneg_float)
    p.add_argument("--scheduler", choices=("linear", "cosine"))
    p.add_argument("--weight-decay", type=_nonneg_float)
    p.add_argument("--seed", type=_nonneg_int)
    _add_format(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold adapters into base weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--out", required=True)
    _add_format(p)
    p.set_defaults(func=cmd_merge)

    def task_flags(p):
        p.add_argument("--kind", choices=TASK_KINDS, default="aligned_teacher")
        p.add_argument("--n-in", type=_positive_int, default=64)
        p.add_argument("--n-out", type=_positive_int, default=64)
        p.add_argument("--rank-star", type=_positive_int, default=4)
        p.add_argument("--noise", type=_nonneg_float, default=0.0)
        p.add_argument("--samples", type=_positive_int, default=500)

    p = sub.add_parser("task", help="write a synthetic task to files")
    task_flags(p)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out-dir", required=True)
    _add_format(p)
    p.set_defaults(func=cmd_task)

    p = sub.add_parser("ablate", help="SVD vs random initialization sweep")
    task_flags(p)
    p.add_argument("--task-seed", type=_nonneg_int, default=0)
    p.add_argument("--ranks", type=_int_list, default=[4])
    p.add_argument("--inits", type=_init_list, default=["svd", "random"])
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="first seed")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--alpha", type=_positive_float, default=DEFAULT_ALPHA)
    p.add_argument("--sigma", type=_nonneg_float, default=DEFAULT_SIGMA)
    p.add_argument("--jobs", type=_positive_int, help="worker threads (default: logical cores)")
    p.add_argument("--records", help="per-epoch records CSV")
    p.add_argument("--summary", help="summary CSV")
    _add_format(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("registry", help="manage a checkpoint registry")
    p.add_argument("--root", default=None, help=f"registry root (default: ${REGISTRY_ENV})")
    rsub = p.add_subparsers(dest="action", required=True)
    rsub.add_parser("init")
    r = rsub.add_parser("add")
    r.add_argument("path")
    for name in ("ls", "verify"):
        r = rsub.add_parser(name)
        _add_format(r)
    r = rsub.add_parser("gc")
    r.add_argument("--delete", action="store_true", help="actually remove files (default: dry run)")
    p.set_defaults(func=cmd_registry)
    return parser


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (UsageError, ParameterError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"loraxs: error: {exc}\n")
        return EXIT_USAGE
    except (LoraXsError, OSError) as exc:
        sys.stderr.write(f"loraxs: error: {exc}\n")
        return EXIT_FAILURE


def run(argv) -> tuple[int, str]:
    """Invoke the CLI in-process and capture standard output."""
    buf = io.StringIO()
    code = main(argv, buf)
    return code, buf.getvalue()


if __name__ == "__main__":
    sys.exit(main())
