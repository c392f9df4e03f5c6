"""In-process stand-in for tensor-parallel scoring.

Each shard sees a contiguous slice of the attention heads and produces
partial token/block scores; the reduction sums them in ascending shard id,
so the result does not depend on the order shards report in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError
from .importance import block_reduce, head_token_scores


class ShardContractError(RuntimeError):
    pass


@dataclass
class ShardScores:
    shard: int
    num_shards: int
    heads: range
    token_scores: np.ndarray
    block_scores: np.ndarray


def shard_heads(num_heads: int, tp: int) -> list[range]:
    if tp <= 0 or num_heads % tp:
        raise ConfigError(f"num_heads={num_heads} is not divisible by tp={tp}")
    per = num_heads // tp
    return [range(t * per, (t + 1) * per) for t in range(tp)]


def sharded_block_scores(q_window: np.ndarray, keys: np.ndarray, tp: int,
                         block_size: int) -> list[ShardScores]:
    """Partial scores per shard. q_window: (n, H, dk) last-n queries; keys: (N, H, dk)."""
    out = []
    for t, hs in enumerate(shard_heads(keys.shape[1], tp)):
        sl = slice(hs.start, hs.stop)
        tok = head_token_scores(q_window[:, sl], keys[:, sl])
        out.append(ShardScores(t, tp, hs, tok, block_reduce(tok, block_size)))
    return out


def layer_shard_scores(model, layer: int, states: np.ndarray, tp: int, score_config,
                       positions: np.ndarray | None = None) -> list[ShardScores]:
    """Shard scores for one request's rows ``states`` entering full-attention ``layer``."""
    from .model import attention_qkv, single_segment

    x = np.asarray(states, dtype=np.float32)
    pos = np.arange(x.shape[0]) if positions is None else np.asarray(positions)
    q, k, _ = attention_qkv(model, layer, x, pos, single_segment(x.shape[0]))
    n = score_config.effective_n(x.shape[0])
    return sharded_block_scores(q[x.shape[0] - n:], k, tp, score_config.block_size_g)


def _check(shards: Sequence[ShardScores], field: str) -> list[ShardScores]:
    if not shards:
        raise ShardContractError("no shards to reduce")
    ordered = sorted(shards, key=lambda s: s.shard)
    tp = ordered[0].num_shards
    ids = [s.shard for s in ordered]
    if ids != list(range(tp)) or any(s.num_shards != tp for s in ordered):
        raise ShardContractError(f"expected shards 0..{tp - 1}, got {ids}")
    lengths = {getattr(s, field).shape for s in ordered}
    if len(lengths) != 1:
        raise ShardContractError(f"shard {field} lengths differ: {sorted(lengths)}")
    return ordered


def allreduce_scores(shards: Sequence[ShardScores], field: str = "block_scores") -> np.ndarray:
    """Elementwise sum of one score field over all shards, ascending shard id.

    Bare arrays are accepted too and taken as shards 0..T-1 in list order.
    """
    shards = [s if isinstance(s, ShardScores) else
              ShardScores(t, len(shards), range(0), np.asarray(s, np.float64), np.asarray(s, np.float64))
              for t, s in enumerate(shards)]
    ordered = _check(shards, field)
    acc = np.array(getattr(ordered[0], field), dtype=np.float64, copy=True)
    for s in ordered[1:]:
        acc += getattr(s, field)
    return acc
