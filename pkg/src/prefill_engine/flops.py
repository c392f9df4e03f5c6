"""Analytic FLOP counts and the savings audit.

Counting conventions (one multiply-add = 2 FLOPs, integer counts):

* projections: 2·n·d² per d×d GEMM; attention layers have four (Q, K, V, O).
* full attention: 2·n²·dk per head for Q·Kᵀ and again for A·V, i.e. 4·n²·d.
* sliding window: as full attention with the key count capped at the window,
  4·n·min(n, w)·d.
* linear attention: 2·n·dk·dk per head for the state update and again for the
  readout, i.e. 4·n·dk·d.
* FFN: up and down projections, 4·n·d·ffn_dim.
* a full-attention layer that drops tokens projects Q/K/V for its c input
  tokens but attends and projects O for the s kept ones:
  6·c·d² + 4·s²·d + 2·s·d².
* scoring overhead (partial Q·Kᵀ of the query window) is tracked apart:
  2·n·c·d per drop event.

Norms, rotary, softmax and residual adds are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .config import ModelConfig, SublayerKind

HEADER = __doc__


class LedgerMismatch(AssertionError):
    pass


def layer_flops(kind: SublayerKind, tokens_in: int, config: ModelConfig,
                retained: int | None = None) -> int:
    n = int(tokens_in)
    if n < 0:
        raise ValueError("tokens_in must be non-negative")
    d, dk = config.hidden_dim, config.head_dim
    kind = SublayerKind(kind)
    if kind is SublayerKind.FFN:
        return 4 * n * d * config.ffn_dim
    if kind is SublayerKind.FULL_ATTENTION:
        if retained is None:
            return 8 * n * d * d + 4 * n * n * d
        s = int(retained)
        return 6 * n * d * d + 2 * s * d * d + 4 * s * s * d
    if kind is SublayerKind.SLIDING_WINDOW_ATTENTION:
        return 8 * n * d * d + 4 * n * min(n, config.window_size) * d
    return 8 * n * d * d + 4 * n * dk * d


def scoring_flops(query_window: int, tokens: int, config: ModelConfig) -> int:
    return 2 * query_window * tokens * config.hidden_dim


@dataclass
class LayerEntry:
    layer: int
    kind: SublayerKind
    tokens_in: int
    tokens_out: int
    flops: int


@dataclass
class DropRecord:
    layer: int
    tokens_before: int
    tokens_after: int
    covered_mass: float

    @property
    def retention(self) -> float:
        return self.tokens_after / self.tokens_before if self.tokens_before else 1.0


@dataclass
class FlopsLedger:
    num_tokens: int
    entries: list[LayerEntry] = field(default_factory=list)
    scoring: list[tuple[int, int]] = field(default_factory=list)
    drops: list[DropRecord] = field(default_factory=list)

    def record(self, layer: int, kind: SublayerKind, tokens_in: int, tokens_out: int,
               config: ModelConfig) -> None:
        dropped = kind is SublayerKind.FULL_ATTENTION and tokens_out != tokens_in
        flops = layer_flops(kind, tokens_in, config, retained=tokens_out if dropped else None)
        self.entries.append(LayerEntry(layer, kind, tokens_in, tokens_out, flops))

    @property
    def total(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def scoring_total(self) -> int:
        return sum(f for _, f in self.scoring)

    def tokens_per_layer(self) -> list[int]:
        return [e.tokens_in for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "num_tokens": self.num_tokens,
            "total": self.total,
            "scoring_overhead": self.scoring_total,
            "layers": [{"layer": e.layer, "kind": e.kind.value, "tokens_in": e.tokens_in,
                        "tokens_out": e.tokens_out, "flops": e.flops} for e in self.entries],
            "drops": [{"layer": r.layer, "tokens_before": r.tokens_before,
                       "tokens_after": r.tokens_after, "retention": r.retention,
                       "covered_mass": r.covered_mass} for r in self.drops],
        }


def dense_ledger(config: ModelConfig, num_tokens: int) -> FlopsLedger:
    ledger = FlopsLedger(num_tokens)
    for layer in range(config.num_layers):
        ledger.record(layer, config.kind(layer), num_tokens, num_tokens, config)
    return ledger


def _spans(history, num_layers: int):
    """(drop event, last layer it still affects) for every drop in the history."""
    events = list(history.events)
    for i, ev in enumerate(events):
        if ev.kind != "drop":
            continue
        end = num_layers - 1
        for later in events[i + 1:]:
            if later.kind == "restore":
                end = later.layer
                break
        yield ev, end


def formula_savings(config: ModelConfig, history) -> int:
    """Savings implied by a drop history alone.

    Each drop at layer l taking c tokens down to s saves, on every later
    layer up to the next reconstitution, that layer's cost at c minus its
    cost at s; the drop layer itself saves the attention core and output
    projection for the c - s dropped queries.
    """
    total = 0
    for ev, end in _spans(history, config.num_layers):
        c, s = ev.before, ev.length
        total += layer_flops(SublayerKind.FULL_ATTENTION, c, config) - \
            layer_flops(SublayerKind.FULL_ATTENTION, c, config, retained=s)
        for layer in range(ev.layer + 1, end + 1):
            kind = config.kind(layer)
            total += layer_flops(kind, c, config) - layer_flops(kind, s, config)
    return total


def linear_form_savings(config: ModelConfig, history) -> Fraction:
    """The literal sum_k (1 - rho_k) * sum_{l > l_k} FLOPs_l(c_k), as an exact fraction.

    Agrees with :func:`formula_savings` restricted to downstream layers when
    every affected layer's cost is linear in its token count.
    """
    total = Fraction(0)
    for ev, end in _spans(history, config.num_layers):
        rho = Fraction(ev.length, ev.before)
        downstream = sum(layer_flops(config.kind(layer), ev.before, config)
                         for layer in range(ev.layer + 1, end + 1))
        total += (1 - rho) * downstream
    return total


def eq11_ratio(layers_after: int, num_tokens: int, hidden_dim: int, head_dim: int) -> float:
    """Propagated GEMM savings over attention-only savings for one drop: (L-l)·N·d² / (N²·dk)."""
    return layers_after * num_tokens * hidden_dim ** 2 / (num_tokens ** 2 * head_dim)


@dataclass
class SavingsReport:
    measured: int
    formula: int
    drop_layer_share: int
    downstream_share: int
    linear_form: Fraction | None
    eq11_ratio: float | None

    @property
    def agrees(self) -> bool:
        return self.measured == self.formula

    def to_dict(self) -> dict:
        return {
            "measured": self.measured,
            "formula": self.formula,
            "agrees": self.agrees,
            "drop_layer_share": self.drop_layer_share,
            "downstream_share": self.downstream_share,
            "linear_form": None if self.linear_form is None else float(self.linear_form),
            "eq11_ratio": self.eq11_ratio,
        }


def validate_savings(dense: FlopsLedger, accel: FlopsLedger, config: ModelConfig,
                     history, strict: bool = False) -> SavingsReport:
    """Compare measured savings with the history-derived formula.

    For single-drop runs also reports the linear (1 - rho)·(layers after)·cost
    form and the propagated-vs-attention-only ratio.
    """
    if dense.num_tokens != accel.num_tokens or len(dense.entries) != len(accel.entries):
        raise LedgerMismatch("ledgers come from different runs")
    measured = dense.total - accel.total
    formula = formula_savings(config, history)
    drops = [e for e in history.events if e.kind == "drop"]
    own = sum(layer_flops(SublayerKind.FULL_ATTENTION, e.before, config)
              - layer_flops(SublayerKind.FULL_ATTENTION, e.before, config, retained=e.length)
              for e in drops)
    linear = None
    ratio = None
    if len(drops) == 1:
        linear = linear_form_savings(config, history)
        (ev, end), = _spans(history, config.num_layers)
        ratio = eq11_ratio(end - ev.layer, ev.before, config.hidden_dim, config.head_dim)
    report = SavingsReport(measured, formula, own, formula - own, linear, ratio)
    if strict and not report.agrees:
        raise LedgerMismatch(f"measured savings {measured} != formula {formula}")
    return report
