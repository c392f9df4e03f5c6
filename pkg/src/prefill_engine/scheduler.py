"""Continuous-batching engine.

Each step packs every running decode (one token each) and then as many
waiting prefills as fit in the token budget, first come first served. A
prefill larger than the whole budget runs as the only prefill of its step.
The prefill forward emits the first generated token; a request finishes once
it has produced ``max_new_tokens`` tokens.
"""

from __future__ import annotations

import json
import queue
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .batch import BatchError, LayerMeta, PackedBatch, Phase, patch_metadata
from .config import EngineOptions, ScoreConfig
from .flops import FlopsLedger
from .model import F32, Model
from .propagation import DropHistory, SegmentInput, packed_forward
from .selection import Selection

__all__ = ["Engine", "Request", "RequestState", "StepOutput", "PackedBatch", "Phase", "LayerMeta",
           "BatchError", "patch_metadata", "run_isolated"]

_NEXT = {Phase.PREFILL: (Phase.DECODE, Phase.FINISHED), Phase.DECODE: (Phase.DECODE, Phase.FINISHED),
         Phase.FINISHED: ()}


@dataclass
class Request:
    request_id: str
    prompt: np.ndarray  # (N, d) embedding rows or (N,) token ids
    max_new_tokens: int
    arrival_step: int = 0
    content_kind: str = "random"


@dataclass
class RequestState:
    request_id: str
    prompt_length: int
    max_new_tokens: int
    arrival_step: int
    phase: Phase = Phase.PREFILL
    history: DropHistory | None = None
    generated: list[int] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    first_token_step: int | None = None
    finish_step: int | None = None
    admitted_wall: float | None = None
    first_token_wall: float | None = None
    finish_wall: float | None = None
    ledger: FlopsLedger | None = None
    selections: list[tuple[int, Selection]] = field(default_factory=list)
    content_kind: str = "random"

    def advance(self, phase: Phase) -> None:
        if phase not in _NEXT[self.phase]:
            raise BatchError(f"request {self.request_id!r}: illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase

    @property
    def ttft_steps(self) -> int | None:
        return None if self.first_token_step is None else self.first_token_step - self.arrival_step

    @property
    def ttft_seconds(self) -> float | None:
        if self.first_token_wall is None or self.admitted_wall is None:
            return None
        return self.first_token_wall - self.admitted_wall

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "prompt_length": self.prompt_length,
            "max_new_tokens": self.max_new_tokens,
            "arrival_step": self.arrival_step,
            "content_kind": self.content_kind,
            "phase": self.phase.value,
            "generated": list(self.generated),
            "ttft_steps": self.ttft_steps,
            "ttft_seconds": self.ttft_seconds,
            "finish_step": self.finish_step,
            "drop_events": [{"layer": layer, "tokens_before": s.num_tokens, "tokens_after": s.num_retained,
                             "retention": s.retention_ratio, "covered_mass": s.covered_mass,
                             "cutoff_rank": s.cutoff_rank, "degenerate": s.degenerate}
                            for layer, s in self.selections],
            "history": self.history.to_list() if self.history else [],
            "flops": None if self.ledger is None else {"total": self.ledger.total,
                                                       "scoring_overhead": self.ledger.scoring_total},
        }


@dataclass
class StepOutput:
    request_id: str
    step: int
    token: int
    phase: str  # phase of the work that produced the token

    def to_json(self) -> str:
        return json.dumps({"request_id": self.request_id, "step": self.step, "token": self.token,
                           "phase": self.phase})


class Engine:
    """Owns all request state; ``submit`` may be called from other threads."""

    def __init__(self, model: Model, mode: str = "uniprefill", score_config: ScoreConfig | None = None,
                 options: EngineOptions | None = None, kv_block_size: int = 16, event_sink=None):
        if mode not in ("dense", "uniprefill"):
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model
        self.mode = mode
        self.score_config = score_config or ScoreConfig()
        self.options = options or EngineOptions()
        self.kv = model.new_cache(kv_block_size=kv_block_size, audit=self.options.audit)
        self.step_index = 0
        self.requests: dict[str, RequestState] = {}
        self.audit_failures: list[str] = []
        self.layer_meta: list[list[LayerMeta]] = []
        self.events: list[str] = []
        self._event_sink = event_sink
        self._inbox: queue.Queue[Request] = queue.Queue()
        self._pending: list[Request] = []
        self._waiting: deque[Request] = deque()
        self._prompts: dict[str, np.ndarray] = {}
        self._running: list[str] = []
        self._seq = 0

    # -- submission -----------------------------------------------------------

    def submit(self, request: Request) -> None:
        self._inbox.put(request)

    def _drain_inbox(self) -> None:
        while True:
            try:
                req = self._inbox.get_nowait()
            except queue.Empty:
                break
            if req.request_id in self.requests or any(r.request_id == req.request_id for r in self._pending):
                raise ValueError(f"duplicate request id {req.request_id!r}")
            if req.max_new_tokens < 1:
                raise ValueError("max_new_tokens must be at least 1")
            self._pending.append(req)
        # stable: arrival step, then submission order
        self._pending.sort(key=lambda r: r.arrival_step)
        while self._pending and self._pending[0].arrival_step <= self.step_index:
            self._waiting.append(self._pending.pop(0))

    def _embed(self, prompt: np.ndarray) -> np.ndarray:
        p = np.asarray(prompt)
        if p.ndim == 1:
            return self.model.embed(p)
        return p.astype(F32, copy=False)

    @property
    def idle(self) -> bool:
        return not (self._running or self._waiting or self._pending or not self._inbox.empty())

    # -- stepping ---------------------------------------------------------------

    def step(self) -> list[StepOutput]:
        self._drain_inbox()
        budget = self.options.token_budget
        decodes = [rid for rid in self._running if self.requests[rid].phase is Phase.DECODE]
        budget -= len(decodes)
        prefills: list[Request] = []
        while self._waiting:
            need = len(self._waiting[0].prompt)
            if need <= budget or (not prefills and not decodes):
                req = self._waiting.popleft()
                prefills.append(req)
                budget -= need
            else:
                break

        if not decodes and not prefills:
            self.step_index += 1
            return []

        now = time.perf_counter()
        inputs = []
        for rid in decodes:
            st = self.requests[rid]
            st.history.decode_appended += 1
            pos = st.prompt_length + st.history.decode_appended - 1
            x = self.model.embed([st.generated[-1]])
            inputs.append(SegmentInput(rid, Phase.DECODE, x, np.asarray([pos], np.int64), st.history))
        for req in prefills:
            x = self._embed(req.prompt)
            st = RequestState(req.request_id, x.shape[0], req.max_new_tokens, req.arrival_step,
                              history=DropHistory(x.shape[0]), content_kind=req.content_kind)
            st.admitted_wall = now
            self.requests[req.request_id] = st
            self._running.append(req.request_id)
            inputs.append(SegmentInput(req.request_id, Phase.PREFILL, x,
                                       np.arange(x.shape[0], dtype=np.int64), st.history))

        opts = self.options
        res = packed_forward(self.model, self.kv, inputs,
                             self.score_config if self.mode == "uniprefill" else None,
                             opts.drop_layers, opts.readmit, opts.tp, opts.audit)
        self.layer_meta.append(res.layer_meta)
        self.audit_failures.extend(f"step {self.step_index}: {f}" for f in res.audit_failures)

        outputs = []
        done = time.perf_counter()
        for inp in inputs:
            rid = inp.request_id
            st = self.requests[rid]
            logits = self.model.logits(res.final_states[rid][-1:])[0]
            token = int(np.argmax(logits))
            st.generated.append(token)
            st.logits.append(logits)
            if inp.phase is Phase.PREFILL:
                st.ledger = res.ledgers[rid]
                st.selections = res.selections[rid]
                st.first_token_step = self.step_index
                st.first_token_wall = done
            finished = len(st.generated) >= st.max_new_tokens
            st.advance(Phase.FINISHED if finished else Phase.DECODE)
            if finished:
                st.finish_step = self.step_index
                st.finish_wall = done
                self._running.remove(rid)
                self.kv.free(rid)
            out = StepOutput(rid, self.step_index, token, inp.phase.value)
            outputs.append(out)
            self._emit(out.to_json())
        self.step_index += 1
        return outputs

    def _emit(self, line: str) -> None:
        self.events.append(line)
        if self._event_sink is not None:
            self._event_sink.write(line + "\n")

    def run(self, requests: Iterable[Request] = (), max_steps: int = 100_000) -> dict[str, RequestState]:
        for r in requests:
            self.submit(r)
        for _ in range(max_steps):
            if self.idle:
                break
            self.step()
        else:
            raise RuntimeError(f"requests still running after {max_steps} steps")
        return self.requests


def run_isolated(model: Model, requests: Sequence[Request], mode: str = "uniprefill",
                 score_config: ScoreConfig | None = None,
                 options: EngineOptions | None = None) -> dict[str, RequestState]:
    """Each request on its own fresh engine, arrival at step 0."""
    out = {}
    for r in requests:
        eng = Engine(model, mode, score_config, options)
        eng.run([Request(r.request_id, r.prompt, r.max_new_tokens, 0, r.content_kind)])
        out[r.request_id] = eng.requests[r.request_id]
    return out
