"""Command-line driver.

    fedepa run --config exp.yaml [--out-dir out] [--seed 3] [--override method=fedavg ...]
    fedepa sweep --config exp.yaml [--out-dir out] [--workers 4]
    fedepa dump-embeddings --config exp.yaml --out emb.csv
    fedepa selftest

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import ConfigError, ExperimentFile, run_cell, run_sweep, summary_csv, summary_json
from .federation import NumericalError, dump_embeddings

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("fedepa")


def _load(args) -> ExperimentFile:
    exp = ExperimentFile.load(args.config) if args.config else ExperimentFile()
    exp = exp.with_overrides(args.override or [])
    if args.seed is not None:
        exp = replace(exp, run=replace(exp.run, seed=args.seed))
    return exp


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_run(args) -> int:
    exp = _load(args)
    try:
        result = run_cell(exp)
    except NumericalError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    r = exp.run
    name = f"{r.method}_seed{r.seed}.json"
    _write(Path(args.out_dir) / name, result.report.to_json())
    f = result.report.final
    print(f"{r.method} seed={r.seed} OA={f['oa']:.4f} BA={f['ba']:.4f} F1={f['f1']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = _load(args)
    cells = exp.cells()
    results = run_sweep(exp, workers=args.workers)
    out = Path(args.out_dir)
    for cell, (row, report) in zip(cells, results):
        if report is not None:
            tag = "_".join(f"{k}{row[k]}" for k in ("method", "beta", "label_ratio", "fusion_mode", "seed"))
            _write(out / "cells" / f"{tag}.json", report)
    rows = [row for row, _ in results]
    _write(out / "summary.csv", summary_csv(rows))
    _write(out / "summary.json", summary_json(rows))
    for row in rows:
        score = f"OA={row['oa']:.4f}" if row["status"] == "ok" else row["status"]
        print(f"{row['method']} beta={row['beta']} labels={row['label_ratio']} "
              f"fusion={row['fusion_mode']} seed={row['seed']} {score}")
    failed = sum(row["status"] != "ok" for row in rows)
    if failed:
        print(f"{failed} of {len(rows)} cells failed", file=sys.stderr)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    exp = _load(args)
    try:
        result = run_cell(exp)
    except NumericalError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    feats, labels = dump_embeddings(result, exp.run)
    path = Path(args.out) if args.out else Path(args.out_dir) / "embeddings.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(feats.shape[1])])
        for y, row in zip(labels, feats):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
    print(f"wrote {len(labels)} embeddings of width {feats.shape[1]} to {path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(seeds=args.seeds, verbose=True)
    return EXIT_OK if not failures else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedepa", description="Multimodal personalized federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="experiment file (YAML or JSON)")
        sp.add_argument("--out-dir", default=out_default)
        sp.add_argument("--seed", type=int, default=None, help="overrides run.seed")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="set a config value, e.g. method=fedavg or data.rho=0.5 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("run", help="run one experiment and write its report")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run the Cartesian product of the sweep axes")
    common(sp)
    sp.add_argument("--workers", type=int, default=1, help="parallel processes (default 1, sequential)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("dump-embeddings", help="write fused test-set features as CSV")
    common(sp)
    sp.add_argument("--out", help="CSV path (default OUT_DIR/embeddings.csv)")
    sp.set_defaults(func=cmd_dump_embeddings)

    sp = sub.add_parser("selftest", help="gradient checks and loss invariants")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits with 2 on usage errors, matching EXIT_CONFIG
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
