"""Command line: ``gres <command> [--config FILE] [--seed N] [--out DIR] ...``.

Commands run in pipeline order inside one run directory::

    gres gen-data --out run
    gres build-graphs --out run
    gres train --out run --variant full
    gres evaluate --out run --variant full

``ablate`` and ``m-sweep`` run whole experiments in memory and write their
tables under the run directory. ``verify`` runs the self-check suite. Every
command exits with status 2 when an invariant check fails and 1 on a usage or
missing-artifact error. ``GRES_LOG_LEVEL`` (e.g. ``INFO``) sets the log level;
``-v`` is shorthand for ``INFO``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import checks
from .config import ConfigError, RunConfig
from .pipeline import (MissingArtifact, RunDir, format_report, label, run_ablation, run_m_sweep,
                       write_manifest, write_sweep)
from .tree2vec import VARIANTS

log = logging.getLogger("gres")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, variant=getattr(args, "variant", None))


def cmd_gen_data(args, cfg):
    ds = RunDir(args.out).gen_data(cfg)
    print(f"dataset: {ds.n_users} users ({len(ds.common_users)} common), {ds.n_items} items, "
          f"{ds.n_categories} categories, {ds.n_dishes} dishes, {len(ds.interactions)} interactions "
          f"-> {Path(args.out) / 'data'}")


def cmd_build_graphs(args, cfg):
    prep = RunDir(args.out).build_graphs(cfg)
    counts = {}
    for e in prep.graph.edges:
        counts[e.type] = counts.get(e.type, 0) + 1
    print("heterogeneous graph edges: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    print(f"split: {len(prep.split.train)}/{len(prep.split.val)}/{len(prep.split.test)}")


def cmd_train(args, cfg):
    _, hist = RunDir(args.out).train(cfg)
    last = hist.epochs[-1]
    print(f"{label(cfg.variant)}: {len(hist.epochs)} epochs, best epoch {hist.best_epoch}, "
          f"final loss {last['loss']:.5f}")


def cmd_evaluate(args, cfg):
    report = RunDir(args.out).evaluate(cfg)
    print(format_report(report, label(cfg.variant)))


def cmd_ablate(args, cfg):
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    table = run_ablation(cfg, seeds=seeds)
    d = Path(args.out) / "ablate"
    d.mkdir(parents=True, exist_ok=True)
    table.to_csv(d / "table.csv")
    text = table.pretty()
    (d / "table.txt").write_text(text + "\n", encoding="utf-8")
    write_manifest(d, "ablate", cfg, extra={"seeds": seeds})
    print(text)


def cmd_m_sweep(args, cfg):
    rows = run_m_sweep(cfg, m_values=args.m)
    d = Path(args.out) / "m_sweep"
    d.mkdir(parents=True, exist_ok=True)
    write_sweep(rows, d / "sweep.csv")
    write_manifest(d, "m-sweep", cfg, extra={"m_values": sorted({r[0] for r in rows})})
    for m, n_u, k, metric, value in rows:
        if k == 10:
            print(f"M={m:.3f} ({n_u} unique users) {metric}@10 {value:.4f}")


def cmd_verify(args, cfg):
    results = checks.run_all(cfg.seed)
    for r in results:
        print(r.line())
    if not all(r.ok for r in results):
        raise AssertionError("verification failed")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic two-domain dataset"),
    "build-graphs": (cmd_build_graphs, "embed documents, split, build and embed the graphs"),
    "train": (cmd_train, "train one variant"),
    "evaluate": (cmd_evaluate, "evaluate a trained variant on the test split"),
    "ablate": (cmd_ablate, "train and evaluate every variant and print the comparison table"),
    "m-sweep": (cmd_m_sweep, "evaluate across unique-user proportions"),
    "verify": (cmd_verify, "run gradient, normalization, metric and tree self-checks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gres", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default="run", help="run directory (default: run)")
        if name in ("train", "evaluate"):
            p.add_argument("--variant", choices=sorted(VARIANTS), help="Tree2vec variant")
        if name == "m-sweep":
            p.add_argument("--m", type=float, action="append",
                           help="unique-user proportion; repeat for several (default: config m_values)")
            p.add_argument("--variant", choices=sorted(VARIANTS), help="Tree2vec variant")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = "INFO" if args.verbose else os.environ.get("GRES_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, cfg)
    except (ConfigError, MissingArtifact, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AssertionError, FloatingPointError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
