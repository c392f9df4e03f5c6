"""Variable-length packed batches and their per-layer metadata."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import F32, Segment


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    FINISHED = "finished"


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerMeta:
    layer: int
    query_start_loc: np.ndarray
    seq_lens: np.ndarray
    num_actual_tokens: int

    def check(self) -> None:
        if int(self.seq_lens.sum()) != self.num_actual_tokens or \
                int(self.query_start_loc[-1]) != self.num_actual_tokens:
            raise BatchError(f"layer {self.layer}: seq_lens/query_start_loc disagree with token count")


@dataclass
class PackedBatch:
    states: np.ndarray  # (T, d) float32
    positions: np.ndarray  # (T,) logical positions
    request_ids: list[str]
    phases: list[Phase]
    cu_seqlens: np.ndarray  # (R + 1,)
    layer_meta: list[LayerMeta] = field(default_factory=list)

    @classmethod
    def pack(cls, request_ids: Sequence[str], phases: Sequence[Phase],
             states: Sequence[np.ndarray], positions: Sequence[np.ndarray]) -> PackedBatch:
        if not (len(request_ids) == len(phases) == len(states) == len(positions)):
            raise BatchError("per-request inputs have different lengths")
        if len(set(request_ids)) != len(request_ids):
            raise BatchError("a request appears twice in one batch")
        lens = [len(p) for p in positions]
        cu = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        d = states[0].shape[1] if states else 0
        x = np.concatenate(states).astype(F32, copy=False) if states else np.empty((0, d), F32)
        pos = np.concatenate(positions).astype(np.int64) if positions else np.empty(0, np.int64)
        b = cls(x, pos, list(request_ids), list(phases), cu)
        b.validate()
        return b

    @property
    def num_requests(self) -> int:
        return len(self.request_ids)

    @property
    def num_tokens(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def seq_lens(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    @property
    def segments(self) -> list[Segment]:
        cu = self.cu_seqlens
        return [Segment(r, int(cu[i]), int(cu[i + 1])) for i, r in enumerate(self.request_ids)]

    def rows_of(self, request_id: str) -> slice:
        i = self.request_ids.index(request_id)
        return slice(int(self.cu_seqlens[i]), int(self.cu_seqlens[i + 1]))

    def meta_for(self, layer: int) -> LayerMeta:
        return LayerMeta(layer, self.cu_seqlens.copy(), self.seq_lens, self.num_tokens)

    def validate(self) -> None:
        cu = self.cu_seqlens
        if cu.size != self.num_requests + 1 or cu[0] != 0:
            raise BatchError("cu_seqlens must start at 0 and have one entry per request plus one")
        if np.any(np.diff(cu) <= 0):
            raise BatchError("cu_seqlens must be strictly increasing")
        if cu[-1] != self.states.shape[0] or cu[-1] != self.positions.size:
            raise BatchError("cu_seqlens does not cover the packed rows")


def patch_metadata(batch: PackedBatch, selections: Mapping[str, object], layer: int) -> PackedBatch:
    """Compact the rows of ``batch`` for the requests that dropped tokens at ``layer``.

    ``selections`` maps request id to a Selection or a boolean keep mask over
    that request's rows; requests not listed (decodes in particular) are left
    as they are. The returned batch carries metadata for the layer after
    ``layer``.
    """
    keep = np.ones(batch.num_tokens, bool)
    for rid, sel in selections.items():
        if sel is None:
            continue
        i = batch.request_ids.index(rid)
        if batch.phases[i] is not Phase.PREFILL:
            raise BatchError(f"request {rid!r} is not in prefill; drops apply to prefill segments only")
        mask = np.asarray(getattr(sel, "keep_mask", sel), dtype=bool)
        rows = batch.rows_of(rid)
        if mask.size != rows.stop - rows.start:
            raise BatchError(f"keep mask for {rid!r} has {mask.size} entries, segment has "
                             f"{rows.stop - rows.start} rows")
        if not mask.any():
            raise BatchError(f"request {rid!r} would keep no tokens")
        keep[rows] = mask
    counts = np.add.reduceat(keep.astype(np.int64), batch.cu_seqlens[:-1]) if batch.num_requests else np.empty(0, np.int64)
    cu = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    out = replace(batch, states=batch.states[keep], positions=batch.positions[keep], cu_seqlens=cu,
                  layer_meta=list(batch.layer_meta))
    meta = out.meta_for(layer + 1)
    meta.check()
    out.layer_meta.append(meta)
    return out
