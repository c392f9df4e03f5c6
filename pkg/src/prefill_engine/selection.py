"""Top-p block selection via monotone float32 -> uint32 keys packed into uint64 words.

phi(x) = bits(x) ^ 0x80000000  if x >= 0
         bits(x) ^ 0xFFFFFFFF  if x <  0

is strictly increasing under unsigned comparison, so a plain integer sort of
``(phi(score) << 32) | ~g`` orders blocks by score descending and, among
equal scores, by index ascending.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ScoreConfig
from .importance import block_counts

SIGN = np.uint32(0x80000000)
ALL_ONES = np.uint32(0xFFFFFFFF)
LOW32 = np.uint64(0xFFFFFFFF)


class SelectionError(ValueError):
    pass


def phi_encode(x) -> np.ndarray | int:
    """Order-preserving uint32 key of float32 values (scalar in, int out)."""
    scalar = np.ndim(x) == 0
    a = np.atleast_1d(np.asarray(x, dtype=np.float32))
    if np.isnan(a).any():
        raise SelectionError("NaN has no position in the score order")
    # -0.0 == +0.0 must map to one key
    a = np.where(a == 0, np.float32(0.0), a)
    bits = a.view(np.uint32)
    out = np.where(bits & SIGN, bits ^ ALL_ONES, bits ^ SIGN).astype(np.uint32)
    return int(out[0]) if scalar else out


def phi_decode(u) -> np.ndarray:
    b = np.atleast_1d(np.asarray(u, dtype=np.uint32))
    bits = np.where(b & SIGN, b ^ SIGN, b ^ ALL_ONES).astype(np.uint32)
    return bits.view(np.float32)


def pack_scores(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float32)
    if s.size >= 2**32:
        raise SelectionError("too many blocks to pack")
    idx = np.arange(s.size, dtype=np.uint64)
    return (phi_encode(s).astype(np.uint64) << np.uint64(32)) | (LOW32 - idx)


def unpack_scores(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(words, dtype=np.uint64)
    scores = phi_decode((w >> np.uint64(32)).astype(np.uint32))
    index = (LOW32 - (w & LOW32)).astype(np.int64)
    return scores, index


def packed_order(scores: np.ndarray) -> np.ndarray:
    """Block indices sorted by score descending, index ascending on ties."""
    words = np.sort(pack_scores(scores))[::-1]
    return unpack_scores(words)[1]


@dataclass
class Selection:
    keep_mask: np.ndarray  # (N,) bool
    block_mask: np.ndarray  # (ceil(N/G),) bool, score-selected blocks only
    retained_indices: np.ndarray
    retention_ratio: float
    cutoff_rank: int
    covered_mass: float
    degenerate: bool = False
    block_scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return int(self.keep_mask.size)

    @property
    def num_retained(self) -> int:
        return int(self.retained_indices.size)

    @classmethod
    def keep_all(cls, num_tokens: int, num_blocks: int, degenerate: bool = False) -> Selection:
        return cls(np.ones(num_tokens, bool), np.ones(num_blocks, bool),
                   np.arange(num_tokens), 1.0, num_blocks, 1.0, degenerate)


def cutoff_from_order(order: np.ndarray, block_scores: np.ndarray, counts: np.ndarray,
                      top_p: float) -> int:
    """Smallest prefix of ``order`` whose share of block mass reaches ``top_p``."""
    if top_p >= 1.0:
        return int(order.size)
    mass = block_scores.astype(np.float64)[order] * counts[order]
    cum = np.cumsum(mass)
    total = cum[-1]
    k = int(np.argmax(cum / total >= top_p)) + 1
    return k


def expand_mask(block_mask: np.ndarray, block_size: int, num_tokens: int,
                sink_count: int, window: int) -> np.ndarray:
    """Token keep mask: block kept, or one of the first ``sink_count`` or last ``window`` tokens."""
    bm = np.asarray(block_mask, dtype=bool)
    expected = -(-num_tokens // block_size)
    if bm.size != expected:
        raise SelectionError(f"block mask has {bm.size} entries, expected {expected}")
    keep = np.repeat(bm, block_size)[:num_tokens]
    keep[:min(sink_count, num_tokens)] = True
    if window > 0:
        keep[max(0, num_tokens - window):] = True
    return keep


def top_p_select(block_scores: np.ndarray, config: ScoreConfig, num_tokens: int,
                 token_scores: np.ndarray | None = None) -> Selection:
    """Keep the highest-scoring blocks until their mass share reaches ``config.top_p``.

    Ranking uses the packed-word sort; the cumulative mass of a block is its
    mean score times its member count, so a ragged tail block is not
    overweighted. Sinks and the query window are forced in afterwards.
    ``covered_mass`` is measured on the final mask, from ``token_scores`` when
    given and block means otherwise.
    """
    g = config.block_size_g
    b = np.asarray(block_scores, dtype=np.float32)
    nblocks = -(-num_tokens // g)
    if b.size != nblocks:
        raise SelectionError(f"{b.size} block scores for {num_tokens} tokens at G={g}")
    if (b < 0).any() or not np.isfinite(b).all():
        raise SelectionError("block scores must be finite and non-negative")
    counts = block_counts(num_tokens, g)
    n_eff = config.effective_n(num_tokens)

    total = float(np.sum(b.astype(np.float64) * counts))
    if total <= 0.0:
        sel = Selection.keep_all(num_tokens, nblocks, degenerate=True)
        sel.block_scores = b
        return sel

    order = packed_order(b)
    k = cutoff_from_order(order, b, counts, config.top_p)
    block_mask = np.zeros(nblocks, bool)
    block_mask[order[:k]] = True
    keep = expand_mask(block_mask, g, num_tokens, config.sink_count_a, n_eff)

    if token_scores is not None:
        o = np.asarray(token_scores, dtype=np.float64)
        covered = float(o[keep].sum() / o.sum())
    else:
        per_token = np.repeat(b.astype(np.float64), g)[:num_tokens]
        covered = float(per_token[keep].sum() / per_token.sum())
    retained = np.flatnonzero(keep)
    return Selection(keep, block_mask, retained, retained.size / num_tokens, k,
                     min(covered, 1.0), False, b)

