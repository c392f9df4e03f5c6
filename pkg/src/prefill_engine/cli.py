"""``engine`` command line: run, bench, tasks, gen-workload."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, EngineOptions, ModelConfig, ScoreConfig, archetype, load_model_config, \
    load_score_config
from .model import build_model
from .report import (DEFAULT_BATCHES, DEFAULT_LENGTHS, REPETITIONS, bench_grid, check_report_integrity,
                     render_bench, render_run, render_tasks, run_workload)
from .tasks import TASK_KINDS, build_suite, run_task_suite
from .workload import dumps_workload, gen_workload, load_workload

BENCH_INIT_STD = 0.3


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _write_report(path: str | None, report: dict, table: str) -> None:
    sys.stdout.write(table)
    if path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(report, indent=2, default=_json_default) + "\n")
        p.with_suffix(".txt").write_text(table)


def _json_default(o):
    import numpy as np
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _score_config(args) -> ScoreConfig:
    sc = load_score_config(args.score_config) if args.score_config else ScoreConfig()
    if getattr(args, "top_p", None) is not None:
        sc = replace(sc, top_p=args.top_p)
    return sc


def _options(args) -> EngineOptions:
    return EngineOptions(
        drop_layers=frozenset(_ints(args.drop_layers)) if args.drop_layers else None,
        readmit=not args.no_readmit,
        tp=args.tp,
        token_budget=args.token_budget,
        audit=not getattr(args, "no_audit", False),
    )


def cmd_run(args) -> int:
    mc = load_model_config(args.model_config)
    sc = _score_config(args)
    seed, entries = load_workload(args.workload)
    opts = _options(args)
    events = None
    if args.events == "-":
        events = sys.stdout
    elif args.events:
        events = open(args.events, "w")
    try:
        report, failures = run_workload(mc, entries, seed, args.mode, sc, opts, args.flops_audit, events)
    finally:
        if events not in (None, sys.stdout):
            events.close()
    failures += check_report_integrity(report)
    report["audit_failures"] = failures
    _write_report(args.report, report, render_run(report))
    for f in failures:
        print(f"AUDIT FAILURE: {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_bench(args) -> int:
    if args.model_config:
        mc = load_model_config(args.model_config)
    else:
        mc = archetype(args.archetype, init_std=BENCH_INIT_STD)
    sc = _score_config(args)
    opts = EngineOptions(tp=args.tp, token_budget=args.token_budget)
    report = bench_grid(mc, _ints(args.lengths), _ints(args.batches), args.modes.split(","), sc,
                        args.content_kind, args.seed, opts, args.reps)
    problems = check_report_integrity(report)
    report["audit_failures"] = problems
    _write_report(args.report, report, render_bench(report))
    return 1 if problems else 0


def cmd_tasks(args) -> int:
    suite = json.loads(Path(args.suite).read_text())
    mc = ModelConfig.from_dict(suite["model_config"]) if "model_config" in suite else \
        archetype(suite.get("archetype", "swa_hybrid"), init_std=BENCH_INIT_STD)
    sc = ScoreConfig.from_dict(suite["score_config"]) if "score_config" in suite else ScoreConfig()
    model = build_model(mc)
    tasks = build_suite(model, suite.get("lengths", [256, 512]), suite.get("kinds", list(TASK_KINDS)),
                        int(suite.get("per_cell", 4)), int(suite.get("answer_length", 4)),
                        int(suite.get("seed", 0)), suite.get("depths"))
    rows, problems = [], []
    for mode in args.modes.split(","):
        r, _ = run_task_suite(model, tasks, mode, sc if mode == "uniprefill" else None)
        rows.extend(r)
        if mode == "dense" and any(x["accuracy"] != 1.0 for x in r):
            problems.append("dense accuracy below 100% on calibrated tasks")
    report = {"command": "tasks", "model_config": mc.to_dict(), "score_config": sc.to_dict(),
              "tasks": [t.to_dict() for t in tasks], "accuracy": rows, "audit_failures": problems}
    _write_report(args.report, report, render_tasks(rows))
    return 1 if problems else 0


def cmd_gen_workload(args) -> int:
    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("seed", "num_requests", "arrival", "rate"):
        val = getattr(args, key)
        if val is not None:
            spec[key] = val
    if args.prompt_lengths:
        spec["prompt_lengths"] = _ints(args.prompt_lengths)
    if args.content_kinds:
        spec["content_kinds"] = args.content_kinds.split(",")
    text = dumps_workload(gen_workload(spec), int(spec.get("seed", 0)))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="engine", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def engine_flags(sp):
        sp.add_argument("--score-config")
        sp.add_argument("--top-p", type=float)
        sp.add_argument("--tp", type=int, default=1)
        sp.add_argument("--token-budget", type=int, default=8192)

    r = sub.add_parser("run", help="run a workload through the engine")
    r.add_argument("--model-config", required=True)
    r.add_argument("--workload", required=True)
    r.add_argument("--mode", choices=["dense", "uniprefill"], default="uniprefill")
    r.add_argument("--report")
    r.add_argument("--events", default=None, help="JSON-lines step events: file path or '-' for stdout")
    r.add_argument("--flops-audit", action="store_true")
    r.add_argument("--drop-layers", help="comma-separated full-attention layers (default: all)")
    r.add_argument("--no-readmit", action="store_true")
    r.add_argument("--no-audit", action="store_true")
    engine_flags(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="throughput grid, dense vs uniprefill")
    b.add_argument("--model-config")
    b.add_argument("--archetype", default="full", choices=["full", "linear_hybrid", "swa_hybrid"])
    b.add_argument("--lengths", default=",".join(map(str, DEFAULT_LENGTHS)))
    b.add_argument("--batches", default=",".join(map(str, DEFAULT_BATCHES)))
    b.add_argument("--modes", default="dense,uniprefill")
    b.add_argument("--content-kind", default="low_entropy")
    b.add_argument("--reps", type=int, default=REPETITIONS)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report")
    engine_flags(b)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("tasks", help="synthetic retrieval accuracy")
    t.add_argument("--suite", required=True)
    t.add_argument("--modes", default="dense,uniprefill")
    t.add_argument("--report")
    t.set_defaults(func=cmd_tasks)

    g = sub.add_parser("gen-workload", help="write a seeded workload file")
    g.add_argument("--spec")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-requests", type=int)
    g.add_argument("--arrival", choices=["poisson", "fixed"])
    g.add_argument("--rate", type=float)
    g.add_argument("--prompt-lengths")
    g.add_argument("--content-kinds")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_workload)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
