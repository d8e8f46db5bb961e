"""Command line entry point: ``ssidec run | sweep | convert | report``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TASKS, TrainingConfig, load_config
from .pipeline import SWEEP_AXES, run_experiment, run_sweep, sweep_table
from .report import emit_report, load_results
from .signals import write_record


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file with TrainingConfig fields")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--mode", choices=("semisup", "unsup"))
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--profile", choices=("full", "desk"))
    p.add_argument("--data-dir", help="directory of VIB1 records")
    p.add_argument("--manifest", help="manifest CSV (default: DATA_DIR/manifest.csv)")
    p.add_argument("--synthetic", type=int, metavar="K", help="use a synthetic corpus with K classes")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.add_argument("--out", help="output directory (default: $SSIDEC_OUT_DIR or ./results)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--no-plots", action="store_true")


def _coerce(cfg: TrainingConfig, key: str, raw: str):
    current = getattr(cfg, key)
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key} expects true/false, got {raw!r}")
        return raw.lower() in ("true", "1")
    return type(current)(raw)


def build_config(args) -> TrainingConfig:
    cfg = load_config(args.config) if args.config else TrainingConfig()
    if args.profile:
        cfg = cfg.with_profile(args.profile)
    changes = {}
    for flag, field_name in (("task", "task_id"), ("mode", "mode"), ("seed", "seed"), ("trials", "trials"),
                             ("data_dir", "data_dir"), ("manifest", "manifest")):
        value = getattr(args, flag)
        if value is not None:
            changes[field_name] = value
    if args.synthetic:
        changes.update(synthetic_classes=args.synthetic, n_cluster=args.synthetic)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not hasattr(cfg, key):
            raise SystemExit(f"bad --set {item!r}: expected FIELD=VALUE with a TrainingConfig field")
        changes[key] = _coerce(cfg, key, raw)
    return cfg.replace(**changes)


def cmd_run(args) -> int:
    cfg = build_config(args)
    result = run_experiment(cfg)
    out = emit_report(result, args.out, force=args.force, plots=not args.no_plots)
    print(out.joinpath("results.txt").read_text(), end="")
    print(f"wrote {out}")
    return 1 if any(t.failure for t in result.trials) else 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    results = run_sweep(cfg, args.axis, values)
    out = emit_report(results, args.out, force=args.force, plots=not args.no_plots, sweep_axis=args.axis)
    for row in sweep_table(results):
        print(f"{row['label']:<16} {row['metric']:<9} {row['mean']:.4f} +- {row['std']:.4f}")
    print(f"wrote {out}")
    return 0


def _load_signal(path: Path, column: int) -> np.ndarray:
    if path.suffix == ".npy":
        data = np.load(path)
    elif path.suffix == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        data = np.loadtxt(path, ndmin=2)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2 and data.shape[1] > 1:
        data = data[:, column]
    return data.ravel()


def cmd_convert(args) -> int:
    """Convert plain-array signals to VIB1 records, optionally from a listing CSV."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.listing:
        with open(args.listing, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        missing = {"source", "label", "condition"} - set(rows[0] if rows else {})
        if missing:
            raise SystemExit(f"listing needs columns source,label,condition (missing {sorted(missing)})")
        base = Path(args.listing).parent
        manifest = []
        for row in rows:
            src = base / row["source"]
            rate = float(row.get("sample_rate_hz") or args.rate)
            name = Path(row["source"]).stem + ".vib"
            write_record(out / name, _load_signal(src, args.column), rate)
            manifest.append((name, row["label"], row["condition"]))
        with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "label", "condition"])
            w.writerows(manifest)
        print(f"wrote {len(manifest)} records and manifest.csv to {out}")
        return 0
    for src in args.inputs:
        src = Path(src)
        write_record(out / (src.stem + ".vib"), _load_signal(src, args.column), args.rate)
    print(f"wrote {len(args.inputs)} records to {out}")
    return 0


def cmd_report(args) -> int:
    results = load_results(args.result)
    out = emit_report(results, args.out, force=args.force, plots=not args.no_plots, sweep_axis=args.axis)
    print(f"wrote {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssidec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one task (all trials)")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="sensitivity sweep over n_sp, n_rep or gamma_c")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("convert", help="convert .npy/.csv/.txt signals to VIB1 records")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--listing", help="CSV with columns source,label,condition[,sample_rate_hz]")
    p.add_argument("--rate", type=float, default=12000.0, help="sample rate in Hz")
    p.add_argument("--column", type=int, default=0, help="column to use for 2-D inputs")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("report", help="re-render artefacts from a result.json")
    p.add_argument("result", help="result.json or a directory containing one")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--axis", help="render as a sweep along this axis")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "convert" and not args.inputs and not args.listing:
        raise SystemExit("convert needs input files or --listing")
    try:
        return args.fn(args)
    except (ValueError, FileExistsError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
