"""Token dropping during prefill and how the sparsity is carried downstream.

At a drop layer every active token still contributes its key and value, but
only retained tokens issue queries, and only they continue through the rest
of the block. Dropped tokens are parked with the state they entered the block
with; at the next block boundary the full sequence is put back together from
the updated retained rows and the untouched parked rows.

:func:`packed_forward` is the single forward loop used by both the
standalone prefill entry points and the batching scheduler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .batch import PackedBatch, Phase, patch_metadata
from .config import ConfigError, ModelConfig, ScoreConfig
from .flops import DropRecord, FlopsLedger, scoring_flops
from .kvcache import PagedKVCache, decode_seqused
from .model import F32, Model, run_sublayer
from .selection import Selection, top_p_select
from .tp import allreduce_scores, sharded_block_scores


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class DropEvent:
    layer: int
    length: int  # active tokens after the event
    kind: str = "drop"  # "drop" or "restore"
    before: int | None = None  # active tokens before the event


@dataclass
class DropHistory:
    original_length: int
    events: list[DropEvent] = field(default_factory=list)
    decode_appended: int = 0

    def add(self, layer: int, length: int, kind: str = "drop", before: int | None = None) -> None:
        if self.events and layer <= self.events[-1].layer:
            raise StreamError(f"history event at layer {layer} does not follow layer {self.events[-1].layer}")
        self.events.append(DropEvent(layer, length, kind, before))

    @classmethod
    def from_pairs(cls, original_length: int, pairs: Iterable[tuple[int, int]],
                   decode_appended: int = 0) -> DropHistory:
        h = cls(original_length, decode_appended=decode_appended)
        prev = original_length
        for layer, length in pairs:
            h.add(layer, length, "drop", prev)
            prev = length
        return h

    def drops(self) -> list[DropEvent]:
        return [e for e in self.events if e.kind == "drop"]

    def to_list(self) -> list[dict]:
        return [{"layer": e.layer, "length": e.length, "kind": e.kind, "before": e.before}
                for e in self.events]


@dataclass
class TokenStream:
    active_states: np.ndarray
    logical_positions: np.ndarray
    parked_states: dict[int, np.ndarray]
    original_length: int
    history: DropHistory

    @classmethod
    def start(cls, states: np.ndarray, history: DropHistory | None = None) -> TokenStream:
        x = np.asarray(states, dtype=F32)
        n = x.shape[0]
        return cls(x, np.arange(n, dtype=np.int64), {}, n, history or DropHistory(n))

    @property
    def num_active(self) -> int:
        return int(self.logical_positions.size)

    def check(self) -> None:
        pos = self.logical_positions
        if pos.size and np.any(np.diff(pos) <= 0):
            raise StreamError("logical positions must be strictly increasing")
        parked = set(self.parked_states)
        if parked & set(pos.tolist()):
            raise StreamError("a position is both active and parked")
        if len(parked) + pos.size != self.original_length:
            raise StreamError("active and parked positions do not partition the sequence")


def apply_drop(stream: TokenStream, selection: Selection | np.ndarray, layer_index: int) -> TokenStream:
    """Park the rows the selection drops; the stream's active rows must be the block input."""
    keep = np.asarray(getattr(selection, "keep_mask", selection), dtype=bool)
    if keep.size != stream.num_active:
        raise StreamError(f"selection covers {keep.size} tokens, stream has {stream.num_active} active")
    parked = dict(stream.parked_states)
    for row in np.flatnonzero(~keep).tolist():
        state = stream.active_states[row].copy()
        state.setflags(write=False)
        parked[int(stream.logical_positions[row])] = state
    before = stream.num_active
    stream.history.add(layer_index, int(keep.sum()), "drop", before)
    return TokenStream(stream.active_states[keep], stream.logical_positions[keep], parked,
                       stream.original_length, stream.history)


def reconstitute(stream: TokenStream, after_layer: int | None = None) -> TokenStream:
    """Full sequence again: active rows as they are, parked rows as they were parked.

    ``after_layer`` records the restore in the history (needed whenever later
    layers will run, so decode sees the restored length there).
    """
    if not stream.parked_states:
        return stream
    n = stream.original_length
    d = stream.active_states.shape[1]
    full = np.empty((n, d), F32)
    full[stream.logical_positions] = stream.active_states
    for pos, state in stream.parked_states.items():
        full[pos] = state
    if after_layer is not None:
        stream.history.add(after_layer, n, "restore", stream.num_active)
    return TokenStream(full, np.arange(n, dtype=np.int64), {}, n, stream.history)


def resolve_drop_layers(config: ModelConfig, drop_layers: Iterable[int] | None) -> frozenset[int]:
    full = set(config.full_attention_layers())
    if drop_layers is None:
        return frozenset(full)
    chosen = frozenset(int(x) for x in drop_layers)
    bad = sorted(chosen - full)
    if bad:
        raise ConfigError(f"drop layers {bad} are not full-attention layers")
    return chosen


@dataclass
class SegmentInput:
    request_id: str
    phase: Phase
    states: np.ndarray  # rows entering layer 0
    positions: np.ndarray
    history: DropHistory


@dataclass
class ForwardResult:
    final_states: dict[str, np.ndarray]  # prefill: all N rows in position order; decode: one row
    histories: dict[str, DropHistory]
    ledgers: dict[str, FlopsLedger]
    selections: dict[str, list[tuple[int, Selection]]]
    layer_meta: list
    audit_failures: list[str]


def _select(q_seg: np.ndarray, k_seg: np.ndarray, score_config: ScoreConfig, tp: int) -> Selection:
    c = k_seg.shape[0]
    n = score_config.effective_n(c)
    if n <= 0:
        raise ConfigError("query_window_n must be at least 1 when dropping")
    shards = sharded_block_scores(q_seg[c - n:], k_seg, tp, score_config.block_size_g)
    blocks = allreduce_scores(shards).astype(np.float32)
    tokens = allreduce_scores(shards, "token_scores")
    return top_p_select(blocks, score_config, c, token_scores=tokens)


def packed_forward(model: Model, kv: PagedKVCache, inputs: Sequence[SegmentInput],
                   score_config: ScoreConfig | None = None, drop_layers: Iterable[int] | None = None,
                   readmit: bool = True, tp: int = 1, audit: bool = False) -> ForwardResult:
    """Run every layer once over a packed batch of prefill and decode segments.

    With ``score_config`` set, prefill segments drop tokens at the chosen
    full-attention layers; without it this is the dense path. Decode
    segments never drop and attend over whatever their layers cached.
    """
    cfg = model.config
    lpb = cfg.layers_per_block
    drops = resolve_drop_layers(cfg, drop_layers) if score_config is not None else frozenset()
    if score_config is not None:
        from .tp import shard_heads
        shard_heads(cfg.num_heads, tp)

    order = [inp.request_id for inp in inputs]
    phases = {inp.request_id: inp.phase for inp in inputs}
    streams: dict[str, TokenStream] = {}
    ledgers: dict[str, FlopsLedger] = {}
    selections: dict[str, list[tuple[int, Selection]]] = {}
    for inp in inputs:
        if inp.phase is Phase.PREFILL:
            if inp.history.events:
                raise StreamError(f"request {inp.request_id!r} already has a prefill history")
            streams[inp.request_id] = TokenStream(np.asarray(inp.states, F32), np.asarray(inp.positions, np.int64),
                                                  {}, len(inp.positions), inp.history)
            ledgers[inp.request_id] = FlopsLedger(len(inp.positions))
            selections[inp.request_id] = []
    histories = {inp.request_id: inp.history for inp in inputs}

    batch = PackedBatch.pack(order, [phases[r] for r in order], [inp.states for inp in inputs],
                             [inp.positions for inp in inputs])
    batch.layer_meta.append(batch.meta_for(0))
    failures: list[str] = []

    for layer in range(cfg.num_layers):
        kind = cfg.kind(layer)
        if layer and layer % lpb == 0 and readmit and any(s.parked_states for s in streams.values()):
            parts, poss = [], []
            for seg in batch.segments:
                rid = seg.request_id
                st = streams.get(rid)
                if st is not None and st.parked_states:
                    st.active_states = batch.states[seg.rows]
                    st = streams[rid] = reconstitute(st, after_layer=layer - 1)
                    parts.append(st.active_states)
                    poss.append(st.logical_positions)
                else:
                    parts.append(batch.states[seg.rows])
                    poss.append(batch.positions[seg.rows])
            meta = batch.layer_meta
            batch = PackedBatch.pack(batch.request_ids, batch.phases, parts, poss)
            batch.layer_meta = meta[:-1] + [batch.meta_for(layer)]

        segs = batch.segments
        selector = None
        if layer in drops:
            def selector(i, seg, q_seg, k_seg, _layer=layer):
                if seg.request_id not in streams:
                    return None
                sel = _select(q_seg, k_seg, score_config, tp)
                selections[seg.request_id].append((_layer, sel))
                return sel.keep_mask

        x_in = batch.states
        out, keeps = run_sublayer(model, layer, x_in, kv, batch.positions, segs, selector)

        dropped = {}
        for seg, keep in zip(segs, keeps):
            rid = seg.request_id
            if rid in ledgers:
                kept = seg.length if keep is None else int(keep.sum())
                ledgers[rid].record(layer, kind, seg.length, kept, cfg)
            if keep is None:
                continue
            st = streams[rid]
            st.active_states = x_in[seg.rows]
            st.logical_positions = batch.positions[seg.rows]
            sel = selections[rid][-1][1]
            streams[rid] = apply_drop(st, sel, layer)
            ledgers[rid].drops.append(DropRecord(layer, seg.length, sel.num_retained, sel.covered_mass))
            ledgers[rid].scoring.append((layer, scoring_flops(score_config.effective_n(seg.length),
                                                              seg.length, cfg)))
            dropped[rid] = keep

        if dropped:
            patched = patch_metadata(PackedBatch(x_in, batch.positions, batch.request_ids, batch.phases,
                                                 batch.cu_seqlens, batch.layer_meta), dropped, layer)
            patched.states = out
            batch = patched
        else:
            batch = PackedBatch(out, batch.positions, batch.request_ids, batch.phases, batch.cu_seqlens,
                                batch.layer_meta + [batch.meta_for(layer + 1)])

        if audit:
            for seg in segs:
                rid = seg.request_id
                want = decode_seqused(histories[rid], layer)
                seen = kv.seen[(layer, rid)]
                if seen != want:
                    failures.append(f"layer {layer} request {rid!r}: seqused {want} but {seen} tokens cached")
                if kind.has_kv and kv.written_count(layer, rid) != seen:
                    failures.append(f"layer {layer} request {rid!r}: {kv.written_count(layer, rid)} "
                                    f"entries written, {seen} tokens seen")

    final = {}
    for seg in batch.segments:
        rid = seg.request_id
        rows = batch.states[seg.rows]
        st = streams.get(rid)
        if st is not None:
            st.active_states = rows
            st.logical_positions = batch.positions[seg.rows]
            st = reconstitute(st)
            final[rid] = st.active_states
        else:
            final[rid] = rows
    if audit and kv.audit:
        failures.extend(kv.audit_reads())
    return ForwardResult(final, histories, ledgers, selections, batch.layer_meta, failures)


@dataclass
class PrefillResult:
    states: np.ndarray
    kv: PagedKVCache
    history: DropHistory
    ledger: FlopsLedger
    selections: list[tuple[int, Selection]]
    audit_failures: list[str]

    def __iter__(self):
        # unpacks as (states, kv, history, ledger)
        return iter((self.states, self.kv, self.history, self.ledger))


def _prefill(model, tokens, score_config, drop_layers, readmit, tp, kv, request_id, audit):
    x = np.asarray(tokens, dtype=F32)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != model.config.hidden_dim:
        raise ValueError("tokens must be a non-empty (N, hidden_dim) matrix")
    kv = kv if kv is not None else model.new_cache(audit=audit)
    n = x.shape[0]
    inp = SegmentInput(request_id, Phase.PREFILL, x, np.arange(n, dtype=np.int64), DropHistory(n))
    res = packed_forward(model, kv, [inp], score_config, drop_layers, readmit, tp, audit)
    return PrefillResult(res.final_states[request_id], kv, res.histories[request_id],
                         res.ledgers[request_id], res.selections[request_id], res.audit_failures)


def accelerated_prefill(model: Model, tokens: np.ndarray, score_config: ScoreConfig,
                        drop_layers: Iterable[int] | None = None, readmit: bool = True, tp: int = 1,
                        kv: PagedKVCache | None = None, request_id: str = "0",
                        audit: bool = False) -> PrefillResult:
    """Prefill with token dropping; unpacks as ``(states, kv, history, ledger)``.

    ``drop_layers`` defaults to every full-attention layer.
    """
    return _prefill(model, tokens, score_config, drop_layers, readmit, tp, kv, request_id, audit)


def dense_prefill_ledgered(model: Model, tokens: np.ndarray, kv: PagedKVCache | None = None,
                           request_id: str = "0", audit: bool = False) -> PrefillResult:
    """The dense path through the same loop, with a FLOPs ledger."""
    return _prefill(model, tokens, None, None, True, 1, kv, request_id, audit)


def check_token_counts(history: DropHistory, ledger: FlopsLedger) -> list[str]:
    """Per-layer processed counts implied by the history versus what the ledger recorded."""
    problems = []
    for e in ledger.entries:
        want = decode_seqused(DropHistory(history.original_length, history.events), e.layer)
        if e.tokens_in != want:
            problems.append(f"layer {e.layer}: ledger {e.tokens_in} tokens, history {want}")
    return problems


__all__ = [
    "DropEvent", "DropHistory", "TokenStream", "apply_drop", "reconstitute", "resolve_drop_layers",
    "SegmentInput", "ForwardResult", "packed_forward", "PrefillResult", "accelerated_prefill",
    "dense_prefill_ledgered", "check_token_counts",
]
