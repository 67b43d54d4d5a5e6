"""Command-line harness.

Subcommands:
  run       execute one experiment from a preset or config file
  rf        receptive-field arithmetic for a conv stack
  verify    run a property suite (gradcheck | causality | baselines)
  compare   aggregate final metrics from several run directories
  presets   list the built-in presets

Exit codes: 0 ok, 1 comparison incomplete, 2 usage error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import presets as presets_mod
from . import tasks, trainer, verify
from .config import ConfigError, apply_override, load_config
from .nn import receptive_field
from .optim import NumericalFailure

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqlab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    src = run_p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="preset name (see `seqlab presets`)")
    src.add_argument("--config", help="path to a config.ini")
    run_p.add_argument("--seed", type=int, default=None, help="master seed override")
    run_p.add_argument("--out", default=None, help="output directory override")
    run_p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. optim.lr=0.001 (repeatable)")
    run_p.add_argument("--resume", default=None, help="checkpoint to resume from")

    rf_p = sub.add_parser("rf", help="receptive-field arithmetic")
    rf_p.add_argument("--k", type=int, required=True, help="kernel size")
    rf_p.add_argument("--n", type=int, default=None, help="number of levels")
    rf_p.add_argument("--base", type=int, default=2, help="dilation growth base")
    rf_p.add_argument("--target", type=int, default=None,
                      help="sequence length the field must cover")

    verify_p = sub.add_parser("verify", help="run a property suite")
    verify_p.add_argument("--suite", required=True, choices=sorted(verify.SUITES))
    verify_p.add_argument("--seed", type=int, default=0)

    cmp_p = sub.add_parser("compare", help="aggregate run directories into a table")
    cmp_p.add_argument("--runs", nargs="+", required=True, help="run directories")
    cmp_p.add_argument("--out", required=True, help="output CSV path")

    sub.add_parser("presets", help="list available presets")
    return p


def _cmd_run(args) -> int:
    if args.preset is not None:
        try:
            cfg = presets_mod.get_preset(args.preset)
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return EXIT_USAGE
    else:
        try:
            cfg = load_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        for item in args.override:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            key, value = item.split("=", 1)
            apply_override(cfg, key.strip(), value.strip())
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    try:
        row, ckpt = trainer.train(cfg, resume_from=args.resume)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (tasks.FormatError, trainer.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    frac = "" if row.fraction_of_baseline is None else f"  ({row.fraction_of_baseline:.4f}x baseline)"
    print(
        f"{cfg.name}: step {row.step}  loss {row.loss:.6g}  "
        f"{row.metric_kind} {row.metric:.6g}{frac}"
    )
    print(f"outputs in {cfg.out_dir}  checkpoint {ckpt}")
    return EXIT_OK


def _cmd_rf(args) -> int:
    if args.n is None and args.target is None:
        print("error: provide --n, --target, or both", file=sys.stderr)
        return EXIT_USAGE
    if args.n is not None:
        rf = receptive_field(args.k, args.n, args.base)
        dilations = ",".join(str(args.base**i) for i in range(args.n))
        print(f"receptive_field: {rf}")
        print(f"dilations: {dilations}")
    if args.target is not None:
        n = 1
        while receptive_field(args.k, n, args.base) < args.target:
            n += 1
            if n > 64:
                print("error: target unreachable (k too small?)", file=sys.stderr)
                return EXIT_USAGE
        print(
            f"minimal n covering {args.target}: {n} "
            f"(receptive_field {receptive_field(args.k, n, args.base)})"
        )
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = verify.SUITES[args.suite](seed=args.seed)
    all_ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  [{r.detail}]" if r.detail else ""
        print(f"{status} {r.name}{detail}")
        all_ok &= r.passed
    print(f"{args.suite}: {sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if all_ok else EXIT_INCOMPLETE


def _final_test_row(metrics_path: Path):
    with open(metrics_path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["split"] == "test"]
    return rows[-1] if rows else None


def _cmd_compare(args) -> int:
    out_rows = []
    incomplete = False
    for run_dir in args.runs:
        run = Path(run_dir)
        entry = {
            "run": run.name,
            "task": "",
            "model": "",
            "params": "",
            "step": "",
            "loss": "",
            "metric": "",
            "metric_kind": "",
            "fraction_of_baseline": "",
            "status": "FAILED",
        }
        metrics = run / "metrics.csv"
        cfg_path = run / "config.ini"
        try:
            cfg = load_config(cfg_path)
            entry["task"] = cfg.task.kind
            entry["model"] = cfg.model.kind
            row = _final_test_row(metrics)
            ckpt = run / "checkpoint.bin"
            if ckpt.exists():
                _, buffers = trainer._parse_checkpoint(ckpt)
                entry["params"] = str(
                    sum(b.size for k, b in buffers.items() if k.startswith("p/"))
                )
            if row is not None:
                entry.update(
                    step=row["step"],
                    loss=row["loss"],
                    metric=row["metric"],
                    metric_kind=row["metric_kind"],
                    fraction_of_baseline=row["fraction_of_baseline"],
                    status="OK",
                )
        except (OSError, ConfigError, trainer.CheckpointError):
            pass
        if entry["status"] != "OK":
            incomplete = True
        out_rows.append(entry)
    fieldnames = list(out_rows[0].keys())
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(out_rows)
    for entry in out_rows:
        print(f"{entry['run']}: {entry['status']}")
    return EXIT_INCOMPLETE if incomplete else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "rf":
        return _cmd_rf(args)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "compare":
        return _cmd_compare(args)
    if args.command == "presets":
        for name in presets_mod.preset_names():
            print(name)
        return EXIT_OK
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
