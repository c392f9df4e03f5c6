"""Synthetic retrieval tasks for a desk-scale accuracy signal.

The toy model has random weights, so a "correct" answer cannot come from
training. Instead a candidate task's expected answer is whatever the dense
path generates greedily, and the task is kept only if swapping its needle
tokens for different ones changes that answer. Dense accuracy is therefore
100% by construction, and a uniprefill miss means the drop path lost
information the dense path actually used.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ConfigError, EngineOptions, ScoreConfig
from .model import Model
from .scheduler import Engine, Request
from .workload import NEEDLE_LENGTH, filler_ids, needle_ids, needle_positions

TASK_KINDS = ("needle_retrieval", "multi_needle")


@dataclass
class SyntheticTask:
    task_id: str
    kind: str
    prompt_length: int
    needle_positions: list[int]
    prompt: np.ndarray
    expected: list[int] = field(default_factory=list)
    needle_length: int = NEEDLE_LENGTH

    def needle_mask(self) -> np.ndarray:
        m = np.zeros(self.prompt_length, bool)
        for p in self.needle_positions:
            m[p:p + self.needle_length] = True
        return m

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "kind": self.kind, "prompt_length": self.prompt_length,
                "needle_positions": self.needle_positions, "expected": self.expected}


def make_task(task_id: str, kind: str, length: int, depths: Sequence[float], vocab_size: int,
              rng: np.random.Generator) -> SyntheticTask:
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    if kind == "needle_retrieval" and len(depths) != 1:
        raise ConfigError("needle_retrieval takes exactly one depth")
    ids = filler_ids(vocab_size, rng, length)
    pos = needle_positions(length, list(depths))
    for p in pos:
        k = min(NEEDLE_LENGTH, length - p)
        ids[p:p + k] = needle_ids(vocab_size, rng, k)
    return SyntheticTask(task_id, kind, length, pos, ids)


def _greedy(model: Model, prompt: np.ndarray, steps: int, mode: str = "dense",
            score_config: ScoreConfig | None = None, options: EngineOptions | None = None):
    eng = Engine(model, mode, score_config, options)
    eng.run([Request("t", prompt, steps)])
    return eng.requests["t"]


def calibrate(model: Model, candidates: Sequence[SyntheticTask], answer_length: int = 4,
              seed: int = 0) -> list[SyntheticTask]:
    """Keep candidates whose dense answer depends on the needle; fill in ``expected``."""
    rng = np.random.default_rng(seed)
    kept = []
    for task in candidates:
        expected = _greedy(model, task.prompt, answer_length).generated
        swapped = task.prompt.copy()
        mask = task.needle_mask()
        original = swapped[mask]
        fresh = needle_ids(model.config.vocab_size, rng, int(mask.sum()))
        if np.array_equal(fresh, original):
            continue
        swapped[mask] = fresh
        if _greedy(model, swapped, answer_length).generated != expected:
            task.expected = list(expected)
            kept.append(task)
    return kept


def build_suite(model: Model, lengths: Sequence[int], kinds: Sequence[str] = TASK_KINDS,
                per_cell: int = 4, answer_length: int = 4, seed: int = 0,
                depths: Sequence[float] | None = None, max_candidates: int = 8) -> list[SyntheticTask]:
    """Calibrated tasks, up to ``per_cell`` per (kind, length)."""
    rng = np.random.default_rng(seed)
    tasks = []
    for kind in kinds:
        for length in lengths:
            cell = []
            for attempt in range(max_candidates * per_cell):
                if len(cell) >= per_cell:
                    break
                if depths is not None:
                    d = list(depths) if kind == "multi_needle" else [float(depths[attempt % len(depths)])]
                else:
                    d = [float(rng.uniform(0.05, 0.8))] if kind == "needle_retrieval" else \
                        sorted(rng.uniform(0.05, 0.8, 3).tolist())
                cand = make_task(f"{kind}-{length}-{attempt}", kind, length, d, model.config.vocab_size, rng)
                cell.extend(calibrate(model, [cand], answer_length, seed=seed + attempt))
            tasks.extend(cell)
    return tasks


@dataclass
class TaskResult:
    task: SyntheticTask
    mode: str
    answer: list[int]
    needles_retained: bool | None

    @property
    def correct(self) -> bool:
        return self.answer == self.task.expected


def needles_retained(task: SyntheticTask, selections) -> bool:
    """True if every drop over the full sequence kept all needle tokens."""
    mask = task.needle_mask()
    for _, sel in selections:
        if sel.num_tokens == task.prompt_length and not sel.keep_mask[mask].all():
            return False
    return True


def run_task_suite(model: Model, tasks: Sequence[SyntheticTask], mode: str,
                   score_config: ScoreConfig | None = None,
                   options: EngineOptions | None = None) -> tuple[list[dict], list[TaskResult]]:
    """Greedy answers for every task; accuracy rows per (kind, prompt length, mode)."""
    results = []
    for task in tasks:
        if not task.expected:
            raise ConfigError(f"task {task.task_id} is not calibrated")
        st = _greedy(model, task.prompt, len(task.expected), mode, score_config, options)
        kept = needles_retained(task, st.selections) if mode == "uniprefill" else None
        results.append(TaskResult(task, mode, list(st.generated), kept))
    cells = defaultdict(list)
    for r in results:
        cells[(r.task.kind, r.task.prompt_length)].append(r)
    rows = []
    for (kind, length), rs in sorted(cells.items()):
        rows.append({"kind": kind, "prompt_length": length, "mode": mode, "tasks": len(rs),
                     "accuracy": sum(r.correct for r in rs) / len(rs),
                     "needles_retained": None if mode != "uniprefill" else
                     sum(bool(r.needles_retained) for r in rs) / len(rs)})
    return rows, results
