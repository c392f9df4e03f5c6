"""Token and block importance from the trailing query window.

Pipeline, per full-attention layer and request::

    raw = Q[-n:] @ K.T / sqrt(dk)      (causally masked, per head)
    token_scores = sum_heads mean_rows softmax(raw)     (streamed, two passes)
    block_scores = per-block mean of token_scores

Scores are accumulated in float64 so that regrouping the head sum (as the
tensor-parallel reduction does) moves results far below float32 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KEY_CHUNK = 1024


class ScoringError(ValueError):
    pass


@dataclass
class ImportanceScores:
    token_scores: np.ndarray  # (N,) float64
    block_scores: np.ndarray  # (ceil(N/G),) float64
    num_tokens: int
    effective_n: int
    num_heads: int


def partial_scores(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Scaled, causally masked scores of the last ``n`` queries against all ``N`` keys.

    queries: (H, n, dk) or (n, dk); keys: (H, N, dk) or (N, dk). Query row
    ``j`` sits at position ``N - n + j``; keys after it are set to ``-inf``.
    """
    q = np.asarray(queries)
    k = np.asarray(keys)
    squeeze = q.ndim == 2
    if squeeze:
        q, k = q[None], k[None]
    n, big_n = q.shape[1], k.shape[1]
    if n > big_n:
        raise ScoringError(f"query window n={n} exceeds sequence length N={big_n}; clamp n first")
    dk = q.shape[-1]
    s = (q.astype(np.float64) @ k.astype(np.float64).transpose(0, 2, 1)) / np.sqrt(dk)
    qpos = np.arange(big_n - n, big_n)
    masked = np.arange(big_n)[None, :] > qpos[:, None]
    s[:, masked] = -np.inf
    return s[0] if squeeze else s


def online_softmax_reduce(raw: np.ndarray, chunk: int = KEY_CHUNK) -> np.ndarray:
    """Per-token attention mass: softmax over all keys per row, mean over rows, sum over heads.

    Streams over key chunks. Pass 1 keeps a running row max and rescaled sum
    of exponentials; pass 2 accumulates the normalised weights.
    """
    s = np.asarray(raw, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    heads, n, big_n = s.shape
    if n == 0:
        raise ScoringError("empty query window")
    row_max = np.full((heads, n), -np.inf)
    row_sum = np.zeros((heads, n))
    for c0 in range(0, big_n, chunk):
        blk = s[:, :, c0:c0 + chunk]
        new_max = np.maximum(row_max, blk.max(axis=-1))
        finite = np.isfinite(new_max)
        safe_max = np.where(finite, new_max, 0.0)
        rescale = np.where(finite, np.exp(np.where(finite, row_max, 0.0) - safe_max), 0.0)
        shifted = np.where(finite[..., None], blk - safe_max[..., None], -np.inf)
        row_sum = row_sum * rescale + np.exp(shifted).sum(axis=-1)
        row_max = new_max
    if not np.isfinite(row_max).all():
        raise ScoringError("a query row has every key masked")

    out = np.zeros(big_n)
    for h in range(heads):  # fixed head order keeps the reduction reproducible
        acc = np.zeros(big_n)
        for c0 in range(0, big_n, chunk):
            blk = s[h, :, c0:c0 + chunk]
            w = np.exp(blk - row_max[h][:, None]) / row_sum[h][:, None]
            acc[c0:c0 + chunk] = w.sum(axis=0)
        out += acc / n
    return out


def block_reduce(token_scores: np.ndarray, block_size: int) -> np.ndarray:
    """Mean score per block of ``block_size`` tokens; the ragged tail averages its actual members."""
    o = np.asarray(token_scores, dtype=np.float64)
    if o.size == 0:
        raise ScoringError("no tokens to reduce")
    if block_size <= 0:
        raise ScoringError("block_size must be positive")
    starts = np.arange(0, o.size, block_size)
    sums = np.add.reduceat(o, starts)
    counts = np.minimum(block_size, o.size - starts)
    return sums / counts


def block_counts(num_tokens: int, block_size: int) -> np.ndarray:
    starts = np.arange(0, num_tokens, block_size)
    return np.minimum(block_size, num_tokens - starts)


def head_token_scores(q_window: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Token scores restricted to the given heads. q_window: (n, H, dk); keys: (N, H, dk)."""
    raw = partial_scores(q_window.transpose(1, 0, 2), keys.transpose(1, 0, 2))
    return online_softmax_reduce(raw)


def importance(q: np.ndarray, k: np.ndarray, query_window: int, block_size: int) -> ImportanceScores:
    """Importance scores for one request at one layer. q, k: (N, H, dk), rotary applied."""
    big_n = k.shape[0]
    n = min(query_window, big_n)
    if n <= 0:
        raise ScoringError("query window must contain at least one token")
    tokens = head_token_scores(q[big_n - n:], k)
    return ImportanceScores(tokens, block_reduce(tokens, block_size), big_n, n, k.shape[1])
