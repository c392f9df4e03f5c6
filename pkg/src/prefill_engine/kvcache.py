"""Paged KV cache with per-layer block tables.

Every layer owns its own block table, but physical pages come from a single
shared pool, so two layers never share a physical page. Retained tokens keep
their logical positions after a drop; pages may therefore be sparsely filled.

Slot of logical position ``p`` for request ``r`` at layer ``l``::

    block_table[l][r][p // B] * B + p % B
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class CacheError(RuntimeError):
    pass


class AllocationMissError(CacheError, KeyError):
    """A slot was requested for a page that was never allocated."""


class CacheBoundsError(CacheError, IndexError):
    """A read or write addressed positions outside the written/allocated range."""


_UNALLOCATED = -1


@dataclass
class _Entries:
    """Written positions and their slots for one (layer, request), in position order."""

    positions: np.ndarray
    slots: np.ndarray

    @classmethod
    def empty(cls) -> _Entries:
        return cls(np.empty(0, np.int64), np.empty(0, np.int64))


class PagedKVCache:
    def __init__(self, num_layers: int, num_heads: int, head_dim: int,
                 kv_block_size: int = 16, initial_pages: int = 64, audit: bool = False,
                 max_pages: int | None = None):
        if kv_block_size <= 0:
            raise ValueError("kv_block_size must be positive")
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.kv_block_size = kv_block_size
        self.audit = audit
        self.max_pages = max_pages

        self._capacity_pages = max(1, initial_pages if max_pages is None else min(initial_pages, max_pages))
        slots = self._capacity_pages * kv_block_size
        self._k = np.zeros((slots, num_heads, head_dim), np.float32)
        self._v = np.zeros((slots, num_heads, head_dim), np.float32)
        self._free: list[int] = list(range(self._capacity_pages - 1, -1, -1))

        self.block_tables: list[dict[str, list[int]]] = [{} for _ in range(num_layers)]
        self._entries: list[dict[str, _Entries]] = [{} for _ in range(num_layers)]
        # recurrent state of linear-attention layers, keyed by (layer, request)
        self.linear_state: dict[tuple[int, str], np.ndarray] = {}
        # tokens that have passed through each layer, for every layer kind
        self.seen: dict[tuple[int, str], int] = defaultdict(int)

        self.write_log: dict[tuple[int, str], set[int]] = defaultdict(set)
        self.read_log: dict[tuple[int, str], set[int]] = defaultdict(set)

    # -- allocation ---------------------------------------------------------

    @property
    def capacity_slots(self) -> int:
        return self._capacity_pages * self.kv_block_size

    def _grow(self) -> None:
        old = self._capacity_pages
        new = old * 2 if self.max_pages is None else min(old * 2, self.max_pages)
        if new == old:
            raise CacheBoundsError(f"cache is full ({old} pages)")
        extra = (new - old) * self.kv_block_size
        pad = np.zeros((extra, self.num_heads, self.head_dim), np.float32)
        self._k = np.concatenate([self._k, pad])
        self._v = np.concatenate([self._v, pad])
        self._free.extend(range(new - 1, old - 1, -1))
        self._capacity_pages = new

    def _take_page(self) -> int:
        if not self._free:
            self._grow()
        return self._free.pop()

    def ensure_pages(self, layer: int, request: str, positions: Iterable[int] | np.ndarray) -> None:
        """Allocate the pages covering ``positions`` for (layer, request)."""
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size == 0:
            return
        if pos.min() < 0:
            raise CacheBoundsError("negative logical position")
        table = self.block_tables[layer].setdefault(request, [])
        pages = np.unique(pos // self.kv_block_size)
        if pages[-1] >= len(table):
            table.extend([_UNALLOCATED] * (int(pages[-1]) + 1 - len(table)))
        for page in pages.tolist():
            if table[page] == _UNALLOCATED:
                table[page] = self._take_page()

    def free(self, request: str) -> None:
        for layer in range(self.num_layers):
            table = self.block_tables[layer].pop(request, [])
            self._free.extend(p for p in table if p != _UNALLOCATED)
            self._entries[layer].pop(request, None)
            self.linear_state.pop((layer, request), None)
            self.seen.pop((layer, request), None)

    # -- addressing ---------------------------------------------------------

    def slot_for(self, layer: int, request: str, position: int) -> int:
        return int(self.slots_for(layer, request, np.asarray([position]))[0])

    def slots_for(self, layer: int, request: str, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.int64)
        table = self.block_tables[layer].get(request)
        if table is None:
            if pos.size:
                raise AllocationMissError(f"no pages allocated for request {request!r} at layer {layer}")
            return pos.copy()
        if pos.size and pos.min() < 0:
            raise CacheBoundsError("negative logical position")
        pages = pos // self.kv_block_size
        arr = np.asarray(table, dtype=np.int64)
        if pos.size and pages.max() >= arr.size:
            raise AllocationMissError(
                f"page {int(pages.max())} not allocated for request {request!r} at layer {layer}")
        phys = arr[pages]
        if (phys == _UNALLOCATED).any():
            miss = int(pages[phys == _UNALLOCATED][0])
            raise AllocationMissError(f"page {miss} not allocated for request {request!r} at layer {layer}")
        return phys * self.kv_block_size + pos % self.kv_block_size

    # -- data ---------------------------------------------------------------

    def write(self, layer: int, request: str, positions: np.ndarray,
              keys: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Store K/V rows at the slots of ``positions``; returns the slots.

        Writes are append-only per (layer, request): new positions must be
        strictly increasing and beyond anything already written.
        """
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size == 0:
            return pos.copy()
        if np.any(np.diff(pos) <= 0):
            raise CacheBoundsError("positions must be strictly increasing")
        entries = self._entries[layer].setdefault(request, _Entries.empty())
        if entries.positions.size and pos[0] <= entries.positions[-1]:
            raise CacheBoundsError(
                f"position {int(pos[0])} already covered at layer {layer} for {request!r}")
        self.ensure_pages(layer, request, pos)
        slots = self.slots_for(layer, request, pos)
        self._k[slots] = keys
        self._v[slots] = values
        entries.positions = np.concatenate([entries.positions, pos])
        entries.slots = np.concatenate([entries.slots, slots])
        if self.audit:
            self.write_log[(layer, request)].update(slots.tolist())
        return slots

    def written_positions(self, layer: int, request: str) -> np.ndarray:
        entries = self._entries[layer].get(request)
        return entries.positions if entries is not None else np.empty(0, np.int64)

    def written_count(self, layer: int, request: str) -> int:
        return int(self.written_positions(layer, request).size)

    def gather(self, layer: int, request: str,
               positions: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (positions, keys, values) for the written entries of (layer, request).

        ``positions`` restricts the read to a subset of written positions; asking
        for an unwritten position is a bounds error.
        """
        entries = self._entries[layer].get(request)
        if entries is None:
            if positions is not None and len(positions):
                raise CacheBoundsError(f"nothing written at layer {layer} for {request!r}")
            empty = np.empty((0, self.num_heads, self.head_dim), np.float32)
            return np.empty(0, np.int64), empty, empty
        if positions is None:
            pos, slots = entries.positions, entries.slots
        else:
            want = np.asarray(positions, dtype=np.int64)
            idx = np.searchsorted(entries.positions, want)
            ok = (idx < entries.positions.size)
            ok[ok] = entries.positions[idx[ok]] == want[ok]
            if not ok.all():
                raise CacheBoundsError(
                    f"positions {want[~ok][:5].tolist()} never written at layer {layer} for {request!r}")
            pos, slots = want, entries.slots[idx]
        if self.audit:
            self.read_log[(layer, request)].update(slots.tolist())
        return pos, self._k[slots], self._v[slots]

    # -- reporting ----------------------------------------------------------

    def stats(self) -> dict:
        per_layer = []
        for layer in range(self.num_layers):
            pages = sum(sum(p != _UNALLOCATED for p in t) for t in self.block_tables[layer].values())
            written = sum(e.positions.size for e in self._entries[layer].values())
            per_layer.append({
                "layer": layer,
                "pages_allocated": int(pages),
                "slots_written": int(written),
                "occupancy": float(written / (pages * self.kv_block_size)) if pages else 0.0,
            })
        return {
            "kv_block_size": self.kv_block_size,
            "capacity_pages": self._capacity_pages,
            "pages_in_use": self._capacity_pages - len(self._free),
            "per_layer": per_layer,
        }

    def audit_reads(self) -> list[str]:
        """Problems found by comparing the read log with the write log."""
        problems = []
        for key, reads in self.read_log.items():
            unwritten = reads - self.write_log.get(key, set())
            if unwritten:
                problems.append(f"layer {key[0]} request {key[1]!r}: read {len(unwritten)} unwritten slots")
        return problems


def recompute_slots_after_drop(cache: PagedKVCache, layers: Iterable[int], request: str,
                               retained_positions: np.ndarray) -> dict[int, np.ndarray]:
    """Write-slot lists for each downstream layer covering exactly the retained positions.

    Positions are not renumbered, so each layer's slots follow its own block
    table. Missing pages are allocated.
    """
    pos = np.asarray(retained_positions, dtype=np.int64)
    out = {}
    for layer in layers:
        cache.ensure_pages(layer, request, pos)
        out[layer] = cache.slots_for(layer, request, pos)
    return out


def decode_seqused(history, layer: int) -> int:
    """Effective KV length a decode step may use at ``layer``.

    The retained length recorded by the last history event strictly before
    ``layer`` (the original prompt length if there is none), plus the number
    of tokens appended by decoding since prefill.
    """
    length = history.original_length
    for event in history.events:
        if event.layer < layer:
            length = event.length
        else:
            break
    return length + history.decode_appended
