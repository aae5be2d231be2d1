"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad input, invalid score),
2 runtime error or usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import graph as G
from .config import apply_env, load_config
from .errors import (ArchParseError, ConfigError, ExecutorFailure, GraphError, InapplicableAction,
                     MalformedLog, ShapeRepairFailure)
from .harness import BenchmarkRun, CommandExecutor, SimulatedExecutor
from .morph import MorphAction, apply_morph
from .opcount import DatasetDescriptor, breakdown_rows
from .runlog import RunLog
from .scoring import compute_score_series, emit_report

log = logging.getLogger("automl_bench")

RUNLOG_NAME = "runlog.jsonl"
_VALIDATION_ERRORS = (ConfigError, GraphError, ArchParseError, InapplicableAction, ShapeRepairFailure,
                      MalformedLog, ValueError)


def _cmd_run(args) -> int:
    cfg = apply_env(load_config(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.executor == "command":
        executor = CommandExecutor(cfg.command_template, out / "work", extra=cfg.passthrough())
    else:
        executor = SimulatedExecutor(cfg.cluster, cfg.dataset)
    run = BenchmarkRun(
        cfg.cluster, executor, data=cfg.dataset, workdir=out,
        default_hyperparams=cfg.hyperparams, header=cfg.to_dict(),
    )
    runlog = run.run(threaded=args.threaded)
    runlog.write(out / RUNLOG_NAME)
    series = compute_score_series(runlog)
    emit_report(series, runlog, out)
    log.info("final score %.4e ops/s, regulated %.4e, valid=%s, trials=%d",
             series.final_score, series.final_regulated_score, series.valid, len(run.history))
    return 0 if series.valid else 1


def _cmd_report(args) -> int:
    runlog = RunLog.read(args.log)
    series = compute_score_series(runlog)
    emit_report(series, runlog, args.out)
    return 0 if series.valid else 1


def _cmd_count(args) -> int:
    graph = G.load(args.arch)
    data = DatasetDescriptor(args.train_images, args.val_images, G.TensorShape.parse(args.image_shape))
    if data.image_shape != graph.input_shape:
        raise ValueError(f"--image-shape {data.image_shape} does not match architecture input {graph.input_shape}")
    rows = breakdown_rows(graph, data)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def _cmd_morph(args) -> int:
    graph = G.load(args.arch)
    for spec in args.action:
        graph = apply_morph(graph, MorphAction.parse(spec))
    G.save(graph, args.out)
    print(graph.digest)
    return 0


def _cmd_seed(args) -> int:
    graph = G.build_resnet50(G.TensorShape.parse(args.image_shape), args.classes)
    G.save(graph, args.out)
    print(graph.digest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="automl-bench", description="AutoML workload benchmark: op counting, "
                                "simulated or external training, cumulative-OPS scoring.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the benchmark and write run log + report")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threaded", action="store_true", help="one thread per replica (non-deterministic)")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("count", help="per-layer-class operation counts as CSV")
    c.add_argument("--arch", required=True)
    c.add_argument("--train-images", type=int, required=True)
    c.add_argument("--val-images", type=int, required=True)
    c.add_argument("--image-shape", required=True, help="HxWxC")
    c.add_argument("--out", help="CSV path (default stdout)")
    c.set_defaults(func=_cmd_count)

    rp = sub.add_parser("report", help="score a run log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=_cmd_report)

    m = sub.add_parser("morph", help="apply morph actions (Kind:node[:param]) to an architecture")
    m.add_argument("--arch", required=True)
    m.add_argument("--action", required=True, action="append")
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_morph)

    s = sub.add_parser("seed", help="write the ResNet-50 seed architecture")
    s.add_argument("--out", required=True)
    s.add_argument("--image-shape", default="224x224x3")
    s.add_argument("--classes", type=int, default=1000)
    s.set_defaults(func=_cmd_seed)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except (ExecutorFailure, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
