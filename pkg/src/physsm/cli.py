"""Command-line entry points.

Subcommands: generate, train, eval, ablate, sweep, uniqueness, plot.
Exit codes: 0 success, 1 runtime failure, 2 configuration error. The output
root defaults to ./physsm_out and can be overridden with PHYSSM_OUT.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config, save_config
from .data import load_dataset, save_dataset
from .errors import ConfigurationError, PhySSMError
from . import training
from .training import (
    MetricsReport,
    evaluate,
    make_datasets,
    run_ablation,
    run_sensitivity,
    train,
    uniqueness_recovery_test,
    write_history,
)

__all__ = ["main"]


def _out_root() -> str:
    return os.environ.get("PHYSSM_OUT", "physsm_out")


def _prepare_dir(path: str, overwrite: bool) -> None:
    if os.path.exists(path) and os.listdir(path) and not overwrite:
        raise ConfigurationError(
            f"output directory {path} exists and is not empty; pass --overwrite"
        )
    os.makedirs(path, exist_ok=True)


def _write_run_manifest(out_dir: str, args: argparse.Namespace, cfg_hash: str,
                        seeds: list[int], outputs: list[str]) -> None:
    manifest = {
        "command_line": " ".join(sys.argv) if sys.argv else "",
        "argv": vars(args).copy(),
        "config_hash": cfg_hash,
        "code_version": __version__,
        "seeds": seeds,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": outputs,
    }
    manifest["argv"] = {k: v for k, v in manifest["argv"].items() if k != "func"}
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_or_make_datasets(args, config: ExperimentConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return make_datasets(config)


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train_seeds"] = (args.seed,)
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig(**overrides)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    out = args.out or os.path.join(
        _out_root(),
        "datasets",
        f"{args.system}-n{args.n}-h{args.horizon}-seed{args.seed}",
    )
    _prepare_dir(out, args.overwrite)
    from .data import build_split_datasets

    splits = build_split_datasets(
        args.system,
        {"train": args.n, "val": args.n_val, "test": args.n_test},
        args.horizon,
        args.dt,
        seed=args.seed,
        noise_sigma=args.noise,
        drop_rate=args.drop,
    )
    save_dataset(out, splits, extra={"horizon": args.horizon})
    _write_run_manifest(out, args, cfg_hash="-", seeds=[args.seed], outputs=[out])
    print(f"dataset written to {out}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = args.out or os.path.join(_out_root(), "runs", f"train-{config_hash(config)}")
    _prepare_dir(out, args.overwrite)
    datasets = _load_or_make_datasets(args, config)
    outputs = []
    for seed in config.train_seeds:
        result = train(config, seed, datasets=datasets,
                       log=(lambda row: print(
                           f"seed {seed} epoch {row['epoch']}: total={row['total']:.5f} "
                           f"val_extrap_mse={row['val_extrap_mse']:.5f}"))
                       if args.verbose else None)
        ckpt = os.path.join(out, f"checkpoint_seed{seed}.npz")
        save_checkpoint(ckpt, result.model, result.build_args)
        hist = os.path.join(out, f"history_seed{seed}.csv")
        write_history(hist, result.history)
        outputs += [ckpt, hist]
        print(
            f"seed {seed}: best epoch {result.best_epoch} "
            f"val extrap MSE {result.best_val_mse:.6f} ({result.runtime_s:.1f}s)"
        )
    save_config(os.path.join(out, "config.cfg"), config)
    _write_run_manifest(out, args, config_hash(config), list(config.train_seeds), outputs)
    print(f"run artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    if not os.path.exists(args.ckpt):
        raise ConfigurationError(f"checkpoint not found: {args.ckpt}")
    model, meta = load_checkpoint(args.ckpt)
    out = args.out or os.path.join(_out_root(), "runs", f"eval-{config_hash(config)}")
    _prepare_dir(out, args.overwrite)
    datasets = _load_or_make_datasets(args, config)
    metrics = evaluate(model, datasets["test"], config)
    report = MetricsReport.from_runs({meta["build_args"]["seed"]: metrics}, 0.0)
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [path]
    if args.dump:
        from .plotting import write_predictions

        dump = os.path.join(out, "predictions.tsv")
        write_predictions(dump, model, datasets["test"], config)
        outputs.append(dump)
    _write_run_manifest(out, args, config_hash(config), [meta["build_args"]["seed"]], outputs)
    for key, val in metrics.items():
        print(f"{key}: {val:.6f}")
    return 0


def _write_table(path: str, rows: list[dict]) -> None:
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(str(row[k]) for k in keys) + "\n")


def _report_row(label: dict, report: MetricsReport) -> dict:
    row = dict(label)
    for key in training.METRIC_KEYS:
        row[f"{key}_mean"] = repr(report.mean[key])
        row[f"{key}_std"] = repr(report.std[key])
    row["runtime_s"] = f"{report.runtime_s:.1f}"
    return row


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    out = args.out or os.path.join(_out_root(), "runs", f"ablate-{config_hash(config)}")
    _prepare_dir(out, args.overwrite)
    datasets = _load_or_make_datasets(args, config)
    reports = run_ablation(config, datasets=datasets)
    rows = [_report_row({"variant": name}, rep) for name, rep in reports.items()]
    table = os.path.join(out, "table.csv")
    _write_table(table, rows)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump({k: v.to_dict() for k, v in reports.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_manifest(out, args, config_hash(config), list(config.train_seeds),
                        [table, os.path.join(out, "report.json")])
    for row in rows:
        print(row)
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    betas = [float(tok) for tok in args.beta.split(",")]
    lambdas = [float(tok) for tok in getattr(args, "lambda").split(",")]
    out = args.out or os.path.join(_out_root(), "runs", f"sweep-{config_hash(config)}")
    _prepare_dir(out, args.overwrite)
    datasets = _load_or_make_datasets(args, config)
    rows_raw = run_sensitivity(config, betas, lambdas, datasets=datasets)
    rows = [
        _report_row({"beta": r["beta"], "lambda": r["lambda"]}, r["report"])
        for r in rows_raw
    ]
    grid = os.path.join(out, "grid.csv")
    _write_table(grid, rows)
    _write_run_manifest(out, args, config_hash(config), [config.train_seeds[0]], [grid])
    for row in rows:
        print(row)
    return 0


def cmd_uniqueness(args) -> int:
    out = args.out or os.path.join(_out_root(), "runs", f"uniqueness-seed{args.seed}")
    _prepare_dir(out, args.overwrite)
    report = uniqueness_recovery_test(seed=args.seed)
    payload = {
        "recovered": report.recovered.tolist(),
        "true": report.true.tolist(),
        "max_abs_error": report.max_abs_error,
        "known_bit_identical": report.known_bit_identical,
        "final_loss": report.final_loss,
    }
    path = os.path.join(out, "recovery.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_manifest(out, args, "-", [args.seed], [path])
    print(
        f"max abs recovery error {report.max_abs_error:.2e}, "
        f"known entries bit-identical: {report.known_bit_identical}"
    )
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_predictions

    out = args.out or os.path.join(_out_root(), "figures")
    os.makedirs(out, exist_ok=True)
    traj_ids = [int(t) for t in args.traj.split(",")] if args.traj else None
    written = plot_predictions(args.dump, out, traj_ids)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physsm",
        description="Physics-enhanced SSM forecasting: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate and write a dataset directory")
    p.add_argument("--system", required=True, choices=["pendulum", "sir", "linear4"])
    p.add_argument("--n", type=int, default=64, help="training trajectories")
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--horizon", type=int, default=300)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--drop", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_generate)

    for name, fn, extras in (
        ("train", cmd_train, ()),
        ("ablate", cmd_ablate, ()),
    ):
        p = sub.add_parser(name, help=f"{name} using a config file")
        p.add_argument("--config", help="config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override: train this single seed")
        p.add_argument("--data", help="existing dataset directory")
        p.add_argument("--out")
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--verbose", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--dump", action="store_true", help="also write predictions.tsv")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="beta x lambda sensitivity grid")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", required=True, help="comma-separated values")
    p.add_argument("--lambda", required=True, help="comma-separated values")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("uniqueness", help="dynamics-decomposition recovery check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_uniqueness)

    p = sub.add_parser("plot", help="figures + CSV from a prediction dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--traj", help="comma-separated trajectory ids (default: all)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except PhySSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
