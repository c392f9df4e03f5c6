"""Toy hybrid transformer: weights, sublayers and the dense prefill path.

Every sublayer is pre-norm with a residual add. Attention layers apply rotary
embeddings at each token's logical position and go through the paged KV
cache; linear attention keeps a per-request recurrent state in the cache
object; FFN layers are position independent.

All GEMMs run per request segment. Results for a request therefore do not
depend on what else is in the batch, bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError, ModelConfig, SublayerKind
from .kvcache import PagedKVCache

F32 = np.float32
LN_EPS = 1e-5
ROPE_BASE = 10000.0
ATTN_TILE = 256


@dataclass(frozen=True)
class Segment:
    """Rows ``[start, stop)`` of a packed batch belonging to one request."""

    request_id: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start

    @property
    def rows(self) -> slice:
        return slice(self.start, self.stop)


def single_segment(num_tokens: int, request_id: str = "0") -> list[Segment]:
    return [Segment(request_id, 0, num_tokens)]


def segments_from_cu(cu_seqlens: Sequence[int], request_ids: Sequence[str]) -> list[Segment]:
    return [Segment(r, int(a), int(b)) for r, a, b in zip(request_ids, cu_seqlens[:-1], cu_seqlens[1:])]


# -- weights ------------------------------------------------------------------


def _philox(seed: int, stream: int) -> np.random.Generator:
    key = (seed % 2**64) | (stream << 64)
    return np.random.Generator(np.random.Philox(key=key))


class Model:
    """Immutable weights of a toy hybrid model. Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        d, f = c.hidden_dim, c.ffn_dim
        std = F32(c.init_std)
        stream = 0

        def normal(shape, scale=std):
            nonlocal stream
            stream += 1
            w = _philox(c.seed, stream).standard_normal(shape, dtype=F32) * F32(scale)
            w.setflags(write=False)
            return w

        self.embedding = normal((c.vocab_size, d), scale=1.0)
        self.layers: list[dict[str, np.ndarray]] = []
        for layer in range(c.num_layers):
            kind = c.kind(layer)
            p = {"ln_g": np.ones(d, F32), "ln_b": np.zeros(d, F32)}
            if kind is SublayerKind.FFN:
                p["w1"] = normal((d, f))
                p["w2"] = normal((f, d))
            else:
                for name in ("wq", "wk", "wv", "wo"):
                    p[name] = normal((d, d))
            for w in p.values():
                w.setflags(write=False)
            self.layers.append(p)
        self.final_ln_g = np.ones(d, F32)
        self.final_ln_b = np.zeros(d, F32)
        self.lm_head = normal((d, c.vocab_size))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self._all_weights():
            h.update(w.tobytes())
        return h.hexdigest()

    def _all_weights(self):
        yield self.embedding
        for p in self.layers:
            for name in sorted(p):
                yield p[name]
        yield self.final_ln_g
        yield self.final_ln_b
        yield self.lm_head

    def embed(self, token_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return self.embedding[np.asarray(token_ids, dtype=np.int64)].copy()

    def logits(self, states: np.ndarray) -> np.ndarray:
        """LM head over final hidden states, one row per state."""
        x = np.atleast_2d(states)
        h = layer_norm(x, self.final_ln_g, self.final_ln_b)
        return np.stack([row @ self.lm_head for row in h]) if len(h) else np.empty((0, self.config.vocab_size), F32)

    def new_cache(self, kv_block_size: int = 16, audit: bool = False) -> PagedKVCache:
        c = self.config
        return PagedKVCache(c.num_layers, c.num_heads, c.head_dim, kv_block_size=kv_block_size, audit=audit)


def build_model(config: ModelConfig) -> Model:
    config.validate()
    if config.head_dim % 2:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {config.head_dim}")
    return Model(config)


# -- primitives -----------------------------------------------------------------


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + F32(LN_EPS))) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    c = F32(np.sqrt(2.0 / np.pi))
    return F32(0.5) * x * (F32(1.0) + np.tanh(c * (x + F32(0.044715) * x * x * x)))


def rotary(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate (n, heads, head_dim) vectors by their logical positions."""
    half = x.shape[-1] // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / x.shape[-1])
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(F32)[:, None, :]
    sin = np.sin(ang).astype(F32)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def seg_matmul(x: np.ndarray, w: np.ndarray, segs: Sequence[Segment]) -> np.ndarray:
    out = np.empty((x.shape[0], w.shape[1]), F32)
    for s in segs:
        if s.length:
            out[s.rows] = x[s.rows] @ w
    return out


def attend(q: np.ndarray, q_pos: np.ndarray, k: np.ndarray, v: np.ndarray, k_pos: np.ndarray,
           window: int | None = None, tile: int = ATTN_TILE) -> np.ndarray:
    """Causal softmax attention by logical position.

    q: (n, H, dk); k, v: (m, H, dk); positions sorted ascending. Key ``i`` is
    visible to query ``j`` iff ``k_pos[i] <= q_pos[j]`` and, with a window,
    ``k_pos[i] > q_pos[j] - window``.
    """
    n, heads, dk = q.shape
    out = np.empty((n, heads, dk), F32)
    if n == 0:
        return out
    scale = F32(1.0 / np.sqrt(dk))
    qh = np.ascontiguousarray(q.transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.transpose(1, 2, 0))
    vh = np.ascontiguousarray(v.transpose(1, 0, 2))
    for t0 in range(0, n, tile):
        t1 = min(n, t0 + tile)
        qp = q_pos[t0:t1]
        hi = int(np.searchsorted(k_pos, qp.max(), side="right"))
        lo = 0 if window is None else int(np.searchsorted(k_pos, qp.min() - window + 1, side="left"))
        kp = k_pos[lo:hi]
        visible = kp[None, :] <= qp[:, None]
        if window is not None:
            visible &= kp[None, :] > qp[:, None] - window
        if not visible.any(axis=1).all():
            raise ValueError("a query has no visible key")
        s = (qh[:, t0:t1] @ kh[:, :, lo:hi]) * scale
        s = np.where(visible[None], s, F32(-np.inf))
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        out[t0:t1] = (s @ vh[:, lo:hi]).transpose(1, 0, 2)
    return out


# -- sublayers ----------------------------------------------------------------

# Called once per prefill segment of a full-attention layer after Q/K are
# formed and K/V written; returns a keep mask over the segment's rows or None.
Selector = Callable[[int, Segment, np.ndarray, np.ndarray], "np.ndarray | None"]


def _heads(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    return x.reshape(x.shape[0], config.num_heads, config.head_dim)


def attention_qkv(model: Model, layer: int, x: np.ndarray, positions: np.ndarray,
                  segs: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotary-embedded per-head Q, K and V for rows ``x`` at ``layer``."""
    p = model.layers[layer]
    h = layer_norm(x, p["ln_g"], p["ln_b"])
    q = _heads(seg_matmul(h, p["wq"], segs), model.config)
    k = _heads(seg_matmul(h, p["wk"], segs), model.config)
    v = _heads(seg_matmul(h, p["wv"], segs), model.config)
    return rotary(q, positions), rotary(k, positions), v


def _attention_layer(model: Model, layer: int, x: np.ndarray, kv: PagedKVCache,
                     positions: np.ndarray, segs: Sequence[Segment],
                     selector: Selector | None = None):
    c = model.config
    p = model.layers[layer]
    window = c.window_size if c.kind(layer) is SublayerKind.SLIDING_WINDOW_ATTENTION else None
    q, k, v = attention_qkv(model, layer, x, positions, segs)

    keeps: list[np.ndarray | None] = []
    out_rows, out_segs, o_parts = [], [], []
    cursor = 0
    for i, s in enumerate(segs):
        pos = positions[s.rows]
        kv.write(layer, s.request_id, pos, k[s.rows], v[s.rows])
        kv.seen[(layer, s.request_id)] += s.length
        keep = selector(i, s, q[s.rows], k[s.rows]) if selector is not None else None
        keeps.append(keep)
        if keep is None:
            rows = np.arange(s.start, s.stop)
            k_pos, kk, vv = kv.gather(layer, s.request_id)
        else:
            rows = s.start + np.flatnonzero(keep)
            k_pos, kk, vv = kv.gather(layer, s.request_id, positions[rows])
        o_parts.append(attend(q[rows], positions[rows], kk, vv, k_pos, window))
        out_rows.append(rows)
        out_segs.append(Segment(s.request_id, cursor, cursor + rows.size))
        cursor += rows.size

    rows = np.concatenate(out_rows) if out_rows else np.empty(0, np.int64)
    o = np.concatenate(o_parts).reshape(rows.size, c.hidden_dim) if o_parts else np.empty((0, c.hidden_dim), F32)
    out = x[rows] + seg_matmul(o, p["wo"], out_segs)
    return out, keeps


def _linear_attention_layer(model: Model, layer: int, x: np.ndarray, kv: PagedKVCache,
                            segs: Sequence[Segment]) -> np.ndarray:
    # Unnormalised linear attention: S_t = S_{t-1} + k_t v_t^T, o_t = S_t^T q_t.
    c = model.config
    p = model.layers[layer]
    h = layer_norm(x, p["ln_g"], p["ln_b"])
    q = _heads(seg_matmul(h, p["wq"], segs), c)
    k = _heads(seg_matmul(h, p["wk"], segs), c)
    v = _heads(seg_matmul(h, p["wv"], segs), c)
    o = np.empty_like(q)
    for s in segs:
        key = (layer, s.request_id)
        state = kv.linear_state.get(key)
        if state is None:
            state = np.zeros((c.num_heads, c.head_dim, c.head_dim), F32)
        if s.length == 0:
            continue
        outer = np.einsum("nhk,nhv->nhkv", k[s.rows], v[s.rows])
        cum = np.cumsum(outer, axis=0) + state[None]
        o[s.rows] = np.einsum("nhk,nhkv->nhv", q[s.rows], cum)
        kv.linear_state[key] = cum[-1].copy()
        kv.seen[key] += s.length
    return x + seg_matmul(o.reshape(-1, c.hidden_dim), p["wo"], segs)


def _ffn_layer(model: Model, layer: int, x: np.ndarray, kv: PagedKVCache | None,
               segs: Sequence[Segment]) -> np.ndarray:
    p = model.layers[layer]
    h = layer_norm(x, p["ln_g"], p["ln_b"])
    if kv is not None:
        for s in segs:
            kv.seen[(layer, s.request_id)] += s.length
    return x + seg_matmul(gelu(seg_matmul(h, p["w1"], segs)), p["w2"], segs)


def run_sublayer(model: Model, layer: int, states: np.ndarray, kv: PagedKVCache,
                 positions: np.ndarray, segs: Sequence[Segment],
                 selector: Selector | None = None):
    """One sublayer over a packed batch.

    Returns ``(new_states, keeps)``; ``keeps`` is only non-trivial for a
    full-attention layer given a selector, in which case ``new_states`` holds
    just the kept rows.
    """
    kind = model.config.kind(layer)
    if kind.is_attention:
        return _attention_layer(model, layer, states, kv, positions, segs,
                                selector if kind is SublayerKind.FULL_ATTENTION else None)
    if kind is SublayerKind.LINEAR_ATTENTION:
        return _linear_attention_layer(model, layer, states, kv, segs), [None] * len(segs)
    return _ffn_layer(model, layer, states, kv, segs), [None] * len(segs)


def forward_sublayer(model: Model, layer_index: int, states: np.ndarray, kv: PagedKVCache,
                     positions: Sequence[int] | np.ndarray, request_id: str = "0",
                     segments: Sequence[Segment] | None = None) -> np.ndarray:
    """Apply one sublayer to ``states`` (one row per entry of ``positions``)."""
    states = np.asarray(states, dtype=F32)
    pos = np.asarray(positions, dtype=np.int64)
    if states.ndim != 2 or states.shape[0] != pos.size:
        raise ValueError(f"states has {states.shape[0]} rows but {pos.size} positions were given")
    segs = list(segments) if segments is not None else single_segment(pos.size, request_id)
    out, _ = run_sublayer(model, layer_index, states, kv, pos, segs)
    return out


def dense_prefill(model: Model, tokens: np.ndarray, kv: PagedKVCache | None = None,
                  request_id: str = "0") -> tuple[np.ndarray, PagedKVCache]:
    """Reference prefill: every layer over every token, nothing dropped."""
    x = np.asarray(tokens, dtype=F32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("tokens must be a non-empty (N, hidden_dim) matrix")
    if x.shape[1] != model.config.hidden_dim:
        raise ValueError(f"token rows have width {x.shape[1]}, expected {model.config.hidden_dim}")
    kv = kv if kv is not None else model.new_cache()
    pos = np.arange(x.shape[0], dtype=np.int64)
    segs = single_segment(x.shape[0], request_id)
    for layer in range(model.config.num_layers):
        x, _ = run_sublayer(model, layer, x, kv, pos, segs)
    return x, kv
