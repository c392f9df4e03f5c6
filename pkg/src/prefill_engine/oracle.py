"""Dense-path comparisons and the attention-drop error bound.

For one drop layer we compare, per head ``h`` and retained query ``j``:

* the dense attention output ``o_j = sum_i a_ji v_i`` over all visible keys;
* the removal form ``o_j - sum_{i dropped} a_ji v_i`` (dropped terms simply
  vanish, weights not renormalised), whose error is bounded by
  ``m_j * V_max`` with ``m_j`` the dropped attention mass of that row;
* the renormalised form the engine actually computes (softmax over the
  retained keys only), whose error is at most ``2 * m_j * V_max``.

``1 - covered_mass`` equals the dropped mass averaged over the query window
rows and heads, so the window/head average of the removal error is bounded
by ``(1 - covered_mass) * V_max``. Individual rows are not: a row may put
far more than the average on dropped keys. Both the average and the
per-row worst case are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .config import ScoreConfig
from .model import F32, Model, attention_qkv, run_sublayer, single_segment
from .propagation import _select

LIPSCHITZ_TRIALS = 64


@dataclass
class ErrorBoundReport:
    layer: int
    num_tokens: int
    num_retained: int
    covered_mass: float
    v_max: float  # max per-head value-vector norm at the drop layer
    mean_window_error: float  # removal error averaged over window rows and heads
    max_removal_error: float  # worst retained row/head, removal form
    max_renorm_error: float  # worst retained row/head, engine (renormalised) form
    max_window_removal_error: float
    max_row_dropped_mass: float
    row_bound_ok: bool  # every row: error <= own dropped mass * V_max
    state_error: float  # max-abs difference of post-attention states, engine form
    lipschitz: list[float] = field(default_factory=list)
    block_end_error: float | None = None
    block_bound: float | None = None

    @property
    def bound(self) -> float:
        return (1.0 - self.covered_mass) * self.v_max

    def average_bound_ok(self, slack: float = 1e-5) -> bool:
        return self.mean_window_error <= self.bound + slack

    def literal_row_ok(self, slack: float = 1e-5) -> bool:
        return self.max_removal_error <= self.bound + slack

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound
        return d


def _dense_weights(q: np.ndarray, k: np.ndarray, q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """(H, n_q, n_k) causal softmax weights, float64."""
    dk = q.shape[-1]
    s = np.einsum("qhd,khd->hqk", q.astype(np.float64), k.astype(np.float64)) / np.sqrt(dk)
    s = np.where(k_pos[None, None, :] <= q_pos[None, :, None], s, -np.inf)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


def _estimate_lipschitz(model: Model, layers: list[int], x: np.ndarray, trials: int,
                        rng: np.random.Generator, eps: float = 1e-3) -> list[float]:
    """Max output/input perturbation ratio per sublayer over random unit directions."""
    out = []
    n = x.shape[0]
    pos = np.arange(n)
    segs = single_segment(n)
    for layer in layers:
        base, _ = run_sublayer(model, layer, x, model.new_cache(), pos, segs)
        best = 0.0
        for _ in range(trials):
            u = rng.standard_normal(x.shape).astype(np.float64)
            u /= np.linalg.norm(u)
            xp = (x + eps * u).astype(F32)
            y, _ = run_sublayer(model, layer, xp, model.new_cache(), pos, segs)
            dx = np.linalg.norm(xp.astype(np.float64) - x)
            if dx > 0:
                best = max(best, float(np.linalg.norm(y.astype(np.float64) - base) / dx))
        out.append(best)
        x = base
    return out


def measure_drop_error(model: Model, states: np.ndarray, score_config: ScoreConfig, layer: int = 0,
                       tp: int = 1, lipschitz_trials: int = 0, seed: int = 0) -> ErrorBoundReport:
    """Error of dropping at full-attention ``layer`` for block-input rows ``states``.

    With ``lipschitz_trials`` > 0 the rest of the block is also run on both
    paths and the end-of-block error is compared with the propagated bound.
    """
    cfg = model.config
    if not cfg.kind(layer).value == "FullAttention":
        raise ValueError(f"layer {layer} is not a full-attention layer")
    x = np.asarray(states, dtype=F32)
    n_tok = x.shape[0]
    pos = np.arange(n_tok)
    segs = single_segment(n_tok)
    q, k, v = attention_qkv(model, layer, x, pos, segs)
    sel = _select(q, k, score_config, tp)
    keep = sel.keep_mask
    kept = np.flatnonzero(keep)
    n_eff = score_config.effective_n(n_tok)

    w = _dense_weights(q[kept], k, pos[kept], pos)  # (H, s, N)
    v64 = v.astype(np.float64).transpose(1, 0, 2)  # (H, N, dk)
    dropped_w = w * (~keep)[None, None, :]
    removal_delta = dropped_w @ v64  # (H, s, dk): dense minus removal form
    mass = dropped_w.sum(axis=-1)  # (H, s)
    removal_err = np.linalg.norm(removal_delta, axis=-1)
    v_norm = np.linalg.norm(v64, axis=-1)  # (H, N)
    v_max = float(v_norm.max())

    dense_o = w @ v64
    kept_w = w * keep[None, None, :]
    renorm_o = (kept_w / kept_w.sum(axis=-1, keepdims=True)) @ v64
    renorm_err = np.linalg.norm(dense_o - renorm_o, axis=-1)

    in_window = pos[kept] >= n_tok - n_eff
    mean_window = float(removal_err[:, in_window].mean())
    row_ok = bool(np.all(removal_err <= mass * v_max * (1 + 1e-9) + 1e-9))

    dense_state, _ = run_sublayer(model, layer, x, model.new_cache(), pos, segs)
    drop_state, _ = run_sublayer(model, layer, x, model.new_cache(), pos, segs,
                                 selector=lambda *a: keep)
    state_err = float(np.abs(dense_state[kept].astype(np.float64) - drop_state).max())

    report = ErrorBoundReport(
        layer=layer, num_tokens=n_tok, num_retained=int(kept.size), covered_mass=sel.covered_mass,
        v_max=v_max, mean_window_error=mean_window, max_removal_error=float(removal_err.max()),
        max_renorm_error=float(renorm_err.max()),
        max_window_removal_error=float(removal_err[:, in_window].max()),
        max_row_dropped_mass=float(mass.max()), row_bound_ok=row_ok, state_error=state_err)

    if lipschitz_trials:
        rest = [layer + m for m in range(1, cfg.layers_per_block)
                if cfg.block_of(layer + m) == cfg.block_of(layer)]
        rng = np.random.default_rng(seed)
        report.lipschitz = _estimate_lipschitz(model, rest, dense_state[kept], lipschitz_trials, rng)
        a, b = dense_state[kept], drop_state
        kpos = pos[kept]
        ksegs = single_segment(kept.size)
        kv_a, kv_b = model.new_cache(), model.new_cache()
        for m in rest:
            a, _ = run_sublayer(model, m, a, kv_a, kpos, ksegs)
            b, _ = run_sublayer(model, m, b, kv_b, kpos, ksegs)
        report.block_end_error = float(np.linalg.norm(a.astype(np.float64) - b, axis=-1).max())
        report.block_bound = report.bound * float(np.prod(report.lipschitz)) if report.lipschitz else report.bound
    return report


def last_token_logit_gap(model: Model, dense_states: np.ndarray, accel_states: np.ndarray) -> float:
    a = model.logits(dense_states[-1:])
    b = model.logits(accel_states[-1:])
    return float(np.abs(a.astype(np.float64) - b).max())


__all__ = ["ErrorBoundReport", "measure_drop_error", "last_token_logit_gap"]
