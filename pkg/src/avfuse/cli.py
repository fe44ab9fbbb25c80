"""``avfuse`` command line: gen-data, train, run-grid, report.

Specs are TOML files (or the built-in names ``acceptance``, ``default`` and
``smoke``) with ``--set key.path=value`` overrides. Artifacts go under
``--out``, else ``$AVFUSE_OUT``, else ``./avfuse-out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiments as ex
from .results import SchemaError, load_tables, render_report

log = logging.getLogger("avfuse")


def _spec(args) -> ex.ExperimentSpec:
    overrides = list(args.set or [])
    if getattr(args, "seeds", None):
        overrides.append(f"seeds=[{args.seeds}]")
    if getattr(args, "workers", None):
        overrides.append(f"workers={args.workers}")
    return ex.load_spec(args.spec, overrides)


def cmd_gen_data(args) -> int:
    overrides = list(args.set or [])
    spec = ex.load_spec(args.config, overrides)
    out = Path(args.out) if args.out else ex.out_root() / "corpus"
    status = ex.gen_data(spec.corpus, out, seed=args.seed, force=args.force)
    print(f"{out}: {status}")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args)
    pipe = ex.Pipeline(spec, ex.out_root(args.out))
    ex.train_all(pipe, ex.grid_cells(spec))
    for name, secs in sorted(pipe.timings.items()):
        print(f"{name}\t{secs:.1f} s")
    return 0


def cmd_run_grid(args) -> int:
    spec = _spec(args)
    run = ex.run_grid(spec, args.out, allow_train=not args.no_train)
    for name, table in run.tables.items():
        print(f"{run.result_dir / name}.csv\t{len(table.rows)} rows")
    print(f"wall time {run.wall_seconds:.0f} s")
    for f in run.failures:
        print(f"FAILED {f}", file=sys.stderr)
    return 1 if run.failures else 0


def cmd_report(args) -> int:
    tables = load_tables(args.dir)
    text, checks = render_report(tables)
    out = Path(args.output) if args.output else Path(args.dir) / "report.md"
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"flagged: {', '.join(failed)}", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avfuse", description="Audio-visual gated fusion experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def spec_args(q, flag="--spec"):
        q.add_argument(flag, default="acceptance", help="TOML spec path or built-in name")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field (repeatable)")

    g = sub.add_parser("gen-data", help="synthesise the corpus to disk")
    spec_args(g, "--config")
    g.add_argument("--seed", type=int, help="corpus seed (default: the spec's)")
    g.add_argument("--out", help="corpus directory (default: $AVFUSE_OUT/corpus)")
    g.add_argument("--force", action="store_true", help="replace a different corpus already in --out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train every checkpoint the spec's grid needs")
    spec_args(t)
    t.add_argument("--out", help="output root (default: $AVFUSE_OUT or ./avfuse-out)")
    t.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run-grid", help="train missing dependencies, evaluate every cell, write tables")
    spec_args(r)
    r.add_argument("--out", help="output root (default: $AVFUSE_OUT or ./avfuse-out)")
    r.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1")
    r.add_argument("--workers", type=int, help="evaluation worker processes")
    r.add_argument("--no-train", action="store_true", help="fail cells whose checkpoints are missing")
    r.set_defaults(func=cmd_run_grid)

    rep = sub.add_parser("report", help="merge result tables and flag failed checks")
    rep.add_argument("--dir", required=True, help="directory holding the result CSVs")
    rep.add_argument("--output", help="report path (default: DIR/report.md)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if not args.verbose:
        logging.getLogger("avfuse.experiments").setLevel(logging.INFO)
    try:
        return args.func(args)
    except (FileNotFoundError, FileExistsError, SchemaError, KeyError, ValueError) as exc:
        print(f"avfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
