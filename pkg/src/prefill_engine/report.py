"""Run reports, the benchmark grid and plain-text tables."""

from __future__ import annotations

import os
import statistics
import time
from typing import Any, Sequence

import numpy as np

from .config import EngineOptions, ModelConfig, ScoreConfig
from .flops import HEADER as FLOPS_HEADER, dense_ledger, validate_savings
from .model import build_model
from .scheduler import Engine, Request
from .workload import materialize

DEFAULT_LENGTHS = (512, 1024, 2048, 4096, 8192)
DEFAULT_BATCHES = (1, 4, 16)
REPETITIONS = 3


def render_table(rows: Sequence[dict], columns: Sequence[str], title: str | None = None) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) < 1e5 else f"{v:.3e}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    out = [title] if title else []
    out += [line, "-" * len(line)]
    out += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


# -- run ------------------------------------------------------------------------


def request_records(engine: Engine) -> list[dict]:
    recs = []
    for st in engine.requests.values():
        d = st.to_dict()
        span = (st.finish_wall - st.admitted_wall) if st.finish_wall is not None else None
        d["tokens_processed"] = st.prompt_length + len(st.generated)
        d["wall_seconds"] = span
        d["tokens_per_second"] = d["tokens_processed"] / span if span else None
        recs.append(d)
    return recs


def aggregate(records: Sequence[dict], wall_seconds: float) -> dict:
    tokens = sum(r["tokens_processed"] for r in records)
    return {"requests": len(records), "tokens_processed": tokens, "wall_seconds": wall_seconds,
            "throughput_tokens_per_s": tokens / wall_seconds if wall_seconds > 0 else None}


def run_workload(model_config: ModelConfig, entries: Sequence[dict], seed: int, mode: str,
                 score_config: ScoreConfig, options: EngineOptions,
                 flops_audit: bool = False, event_sink=None) -> tuple[dict, list[str]]:
    """Run a workload through the engine; returns (report, audit failures).

    Step events go to ``event_sink`` (any writable text stream) as JSON lines.
    """
    model = build_model(model_config)
    engine = Engine(model, mode, score_config, options, event_sink=event_sink)
    reqs = [Request(f"req{i}", materialize(e, i, seed, model_config), int(e["max_new_tokens"]),
                    int(e["arrival_step"]), e.get("content_kind", "random")) for i, e in enumerate(entries)]
    t0 = time.perf_counter()
    engine.run(reqs)
    wall = time.perf_counter() - t0
    failures = list(engine.audit_failures)
    records = request_records(engine)

    flops = {"header": FLOPS_HEADER.strip(), "requests": []}
    for st in engine.requests.values():
        dense = dense_ledger(model_config, st.prompt_length)
        row = {"request_id": st.request_id, "dense_total": dense.total, "run_total": st.ledger.total,
               "scoring_overhead": st.ledger.scoring_total}
        if mode == "uniprefill":
            sv = validate_savings(dense, st.ledger, model_config, st.history)
            row["savings"] = sv.to_dict()
            if flops_audit and not sv.agrees:
                failures.append(f"{st.request_id}: measured FLOPs savings {sv.measured} != formula {sv.formula}")
        flops["requests"].append(row)
    flops["dense_total"] = sum(r["dense_total"] for r in flops["requests"])
    flops["run_total"] = sum(r["run_total"] for r in flops["requests"])

    report = {
        "command": "run",
        "mode": mode,
        "model_config": model_config.to_dict(),
        "score_config": score_config.to_dict(),
        "options": {"drop_layers": sorted(options.drop_layers) if options.drop_layers is not None else None,
                    "readmit": options.readmit, "tp": options.tp, "token_budget": options.token_budget,
                    "audit": options.audit, "flops_audit": flops_audit},
        "requests": records,
        "aggregate": aggregate(records, wall),
        "flops": flops,
        "kv_cache": engine.kv.stats(),
        "steps": engine.step_index,
        "audit_failures": failures,
    }
    return report, failures


def render_run(report: dict) -> str:
    rows = []
    for r in report["requests"]:
        ev = r["drop_events"]
        rows.append({"request": r["request_id"], "prompt": r["prompt_length"], "new": len(r["generated"]),
                     "ttft_steps": r["ttft_steps"], "ttft_s": r["ttft_seconds"],
                     "tok/s": r["tokens_per_second"],
                     "min_retention": min((e["retention"] for e in ev), default=None)})
    text = render_table(rows, ["request", "prompt", "new", "ttft_steps", "ttft_s", "tok/s", "min_retention"],
                        f"mode={report['mode']}")
    agg = report["aggregate"]
    text += (f"throughput {agg['throughput_tokens_per_s']:.1f} tok/s over {agg['wall_seconds']:.3f}s; "
             f"FLOPs {report['flops']['run_total']} (dense {report['flops']['dense_total']}); "
             f"audit failures: {len(report['audit_failures'])}\n")
    return text


# -- bench ------------------------------------------------------------------------


def _available_bytes() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def estimate_cell_bytes(config: ModelConfig, length: int, batch: int) -> int:
    """Rough peak: KV for every layer and request plus one attention tile and activations."""
    d = config.hidden_dim
    kv = config.num_layers * length * batch * 2 * d * 4 * 2  # pool doubles on growth
    tile = 256 * length * config.num_heads * 4 * 4
    acts = length * max(d, config.ffn_dim) * 4 * 8
    return kv + tile + acts


def bench_cell(model, config: ModelConfig, length: int, batch: int, mode: str, score_config: ScoreConfig,
               content_kind: str, seed: int, options: EngineOptions, reps: int) -> dict:
    entries = [{"prompt_length": length, "max_new_tokens": 1, "content_kind": content_kind,
                "arrival_step": 0} for _ in range(batch)]
    prompts = [materialize(e, i, seed, config) for i, e in enumerate(entries)]
    times, flops, retention = [], None, []
    for _ in range(reps):
        eng = Engine(model, mode, score_config, options)
        for i, p in enumerate(prompts):
            eng.submit(Request(f"b{i}", p, 1))
        t0 = time.perf_counter()
        eng.run()
        times.append(time.perf_counter() - t0)
        flops = sum(st.ledger.total for st in eng.requests.values())
        retention = [s.retention_ratio for st in eng.requests.values() for _, s in st.selections]
    med = statistics.median(times)
    return {"length": length, "batch": batch, "mode": mode, "status": "ok", "seconds": times,
            "median_seconds": med, "tokens_per_s": length * batch / med, "flops": flops,
            "mean_retention": float(np.mean(retention)) if retention else None}


def bench_grid(config: ModelConfig, lengths: Sequence[int] = DEFAULT_LENGTHS,
               batches: Sequence[int] = DEFAULT_BATCHES, modes: Sequence[str] = ("dense", "uniprefill"),
               score_config: ScoreConfig | None = None, content_kind: str = "low_entropy", seed: int = 0,
               options: EngineOptions | None = None, reps: int = REPETITIONS,
               memory_limit: int | None = None) -> dict:
    """Throughput per (length, batch, mode) with speedup relative to dense."""
    score_config = score_config or ScoreConfig()
    options = options or EngineOptions()
    model = build_model(config)
    limit = memory_limit if memory_limit is not None else _available_bytes()
    cells = []
    for length in lengths:
        for batch in batches:
            for mode in modes:
                need = estimate_cell_bytes(config, length, batch)
                if limit is not None and need > limit:
                    cells.append({"length": length, "batch": batch, "mode": mode, "status": "skipped: memory",
                                  "estimated_bytes": need})
                    continue
                try:
                    cells.append(bench_cell(model, config, length, batch, mode, score_config, content_kind,
                                            seed, options, reps))
                except MemoryError:
                    cells.append({"length": length, "batch": batch, "mode": mode, "status": "skipped: memory"})
    add_speedups(cells)
    return {"command": "bench", "model_config": config.to_dict(), "score_config": score_config.to_dict(),
            "content_kind": content_kind, "seed": seed, "repetitions": reps, "cells": cells}


def add_speedups(cells: list[dict]) -> None:
    base = {(c["length"], c["batch"]): c["tokens_per_s"] for c in cells
            if c["mode"] == "dense" and c["status"] == "ok"}
    for c in cells:
        b = base.get((c["length"], c["batch"]))
        c["speedup"] = c["tokens_per_s"] / b if b and c["status"] == "ok" else None


def render_bench(report: dict) -> str:
    cols = ["length", "batch", "mode", "status", "median_seconds", "tokens_per_s", "speedup", "mean_retention"]
    return render_table(report["cells"], cols, "prefill throughput (tokens/s), dense = 1.00x")


def render_tasks(rows: Sequence[dict]) -> str:
    return render_table(rows, ["kind", "prompt_length", "mode", "tasks", "accuracy", "needles_retained"],
                        "synthetic task accuracy")


def check_report_integrity(report: dict[str, Any]) -> list[str]:
    """Aggregates must be recomputable from the per-request / per-cell records."""
    problems = []
    if report.get("command") == "run":
        agg = aggregate(report["requests"], report["aggregate"]["wall_seconds"])
        if agg != report["aggregate"]:
            problems.append("aggregate does not match per-request records")
        if report["flops"]["run_total"] != sum(r["run_total"] for r in report["flops"]["requests"]):
            problems.append("FLOPs total does not match per-request ledgers")
    elif report.get("command") == "bench":
        for c in report["cells"]:
            if c["status"] != "ok":
                continue
            if c["median_seconds"] != statistics.median(c["seconds"]):
                problems.append(f"cell {c['length']}x{c['batch']} {c['mode']}: median mismatch")
            if not np.isfinite(c["tokens_per_s"]) or c["tokens_per_s"] <= 0:
                problems.append(f"cell {c['length']}x{c['batch']} {c['mode']}: bad throughput")
    return problems
