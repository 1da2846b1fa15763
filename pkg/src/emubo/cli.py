"""Command line: list, run, fit-emulator, validate-emulator, report."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .emulator import EmulatorError, FitConfig, MlpEmulator, fit_emulator, validate_emulator
from .metrics import MetricError
from .problems import ProblemError, list_problems, load_manifest
from .report import METRICS, ExportError, export_runs, final_line, report
from .runner import ConfigError, load_config, run_experiment


def _read_table(path: str) -> tuple[list[str], np.ndarray, list[str] | None]:
    """Numeric CSV with a header; an optional ``split`` column (train/test) is split off."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise EmulatorError(f"{path} has no data rows")
    head = rows[0]
    split = None
    if "split" in head:
        j = head.index("split")
        split = [r[j] for r in rows[1:]]
        head = head[:j] + head[j + 1:]
        rows = [rows[0]] + [r[:j] + r[j + 1:] for r in rows[1:]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as e:
        raise EmulatorError(f"{path}: non-numeric cell ({e})") from e
    return head, data, split


def _targets(head: list[str], arg: str | None) -> list[int]:
    names = arg.split(",") if arg else [head[-1]]
    missing = [n for n in names if n not in head]
    if missing:
        raise EmulatorError(f"target column(s) not found: {', '.join(missing)}")
    return [head.index(n) for n in names]


def cmd_list(args) -> int:
    man = load_manifest()
    for name in list_problems(man):
        base = name.removesuffix("-synthetic")
        fam = man["problems"][base]["family"]
        kind = "bundled stand-in" if name.endswith("-synthetic") else "needs released assets"
        print(f"{name:28s} {fam:4s} {kind}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg = cfg.with_seeds(int(s) for s in args.seeds.split(","))
    out = Path(args.out or cfg.output.dir)
    recs = run_experiment(cfg)
    export_runs(recs, out, cfg, wall_clock=cfg.output.wall_clock)
    print(f"wrote {len(recs)} run(s) to {out}")
    if len(recs) >= 2:
        for m in cfg.output.metrics:
            try:
                s, _ = report(out, m, svg=cfg.output.svg)
                print(final_line(s, m, cfg.method.name))
            except MetricError as e:
                print(f"{m}: skipped ({e})")
    return 0


def cmd_fit(args) -> int:
    head, data, split = _read_table(args.data)
    tj = _targets(head, args.targets)
    xj = [j for j in range(len(head)) if j not in tj]
    test_idx = None
    if split is not None:
        test_idx = np.array([i for i, s in enumerate(split) if s == "test"], dtype=int)
    cfg = FitConfig(hidden_width=args.width, dropout_rate=args.dropout, epochs=args.epochs,
                    seed=args.seed, test_fraction=args.test_fraction)
    em, rep = fit_emulator(data[:, xj], data[:, tj], cfg, [head[j] for j in tj], test_idx)
    em.save(args.out)
    for name, a, b in zip(em.output_names, rep.rho_train, rep.rho_test):
        print(f"{name}: spearman train={a:.4f} test={b:.4f} (n_train={rep.n_train}, n_test={rep.n_test})")
    return 0


def cmd_validate(args) -> int:
    em = MlpEmulator.load(args.model)
    head, data, split = _read_table(args.data)
    tj = _targets(head, ",".join(em.output_names) if all(n in head for n in em.output_names)
                  else args.targets)
    xj = [j for j in range(len(head)) if j not in tj]
    groups = {"all": np.arange(len(data))}
    if split is not None:
        groups = {g: np.array([i for i, s in enumerate(split) if s == g]) for g in ("train", "test")}
    for g, idx in groups.items():
        if len(idx) < 2:
            continue
        rho = validate_emulator(em, data[idx][:, xj], data[idx][:, tj])
        for name, r in zip(em.output_names, rho):
            print(f"{name}: spearman {g}={r:.4f} (n={len(idx)})")
    return 0


def cmd_report(args) -> int:
    s, paths = report(args.runs, args.metric, svg=args.svg)
    print(final_line(s, args.metric, Path(args.runs).name))
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emubo", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("list", help="problem catalog").set_defaults(fn=cmd_list)

    r = sub.add_parser("run", help="run an experiment config (TOML or JSON)")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated seeds overriding the config")
    r.add_argument("--out", help="output directory overriding the config")
    r.set_defaults(fn=cmd_run)

    f = sub.add_parser("fit-emulator", help="train an MLP emulator on a tabular CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--targets", help="comma-separated target columns (default: last column)")
    f.add_argument("--width", type=int, default=FitConfig.hidden_width)
    f.add_argument("--dropout", type=float, default=FitConfig.dropout_rate)
    f.add_argument("--epochs", type=int, default=FitConfig.epochs)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--test-fraction", type=float, default=FitConfig.test_fraction)
    f.set_defaults(fn=cmd_fit)

    v = sub.add_parser("validate-emulator", help="Spearman correlation of an emulator on a CSV")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--targets", help="target columns if they differ from the model's output names")
    v.set_defaults(fn=cmd_validate)

    p = sub.add_parser("report", help="aggregate a metric over an exported run directory")
    p.add_argument("--runs", required=True)
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ProblemError, EmulatorError, ExportError, MetricError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
