"""Model and scoring configuration.

Both configs round-trip through plain JSON documents whose keys match the
dataclass field names.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class SublayerKind(str, enum.Enum):
    FULL_ATTENTION = "FullAttention"
    SLIDING_WINDOW_ATTENTION = "SlidingWindowAttention"
    LINEAR_ATTENTION = "LinearAttention"
    FFN = "FFN"

    @property
    def is_attention(self) -> bool:
        return self in (SublayerKind.FULL_ATTENTION, SublayerKind.SLIDING_WINDOW_ATTENTION)

    @property
    def has_kv(self) -> bool:
        """Whether the layer writes to the paged KV cache."""
        return self.is_attention


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a toy hybrid transformer.

    ``layer_pattern`` describes one repeating block and has
    ``1 + sublayers_per_block`` entries, the first of which is always full
    attention. ``init_std`` is an optional extension controlling the spread of
    the random weights; larger values give sharper attention patterns.
    """

    num_blocks: int
    sublayers_per_block: int
    layer_pattern: tuple[SublayerKind, ...]
    hidden_dim: int
    head_dim: int
    num_heads: int
    window_size: int
    ffn_dim: int
    vocab_size: int
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self) -> None:
        pattern = tuple(SublayerKind(k) for k in self.layer_pattern)
        object.__setattr__(self, "layer_pattern", pattern)
        self.validate()

    def validate(self) -> None:
        for name in ("num_blocks", "sublayers_per_block", "hidden_dim", "head_dim",
                     "num_heads", "window_size", "ffn_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.layer_pattern:
            raise ConfigError("layer_pattern must not be empty")
        if self.layer_pattern[0] is not SublayerKind.FULL_ATTENTION:
            raise ConfigError("layer_pattern[0] must be FullAttention")
        if len(self.layer_pattern) != 1 + self.sublayers_per_block:
            raise ConfigError(
                f"layer_pattern has {len(self.layer_pattern)} entries, expected "
                f"1 + sublayers_per_block = {1 + self.sublayers_per_block}"
            )
        if self.num_heads * self.head_dim != self.hidden_dim:
            raise ConfigError(
                f"hidden_dim ({self.hidden_dim}) != num_heads × head_dim "
                f"({self.num_heads} × {self.head_dim})"
            )
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive")

    @property
    def layers_per_block(self) -> int:
        return 1 + self.sublayers_per_block

    @property
    def num_layers(self) -> int:
        return self.num_blocks * self.layers_per_block

    def kind(self, layer: int) -> SublayerKind:
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.num_layers})")
        return self.layer_pattern[layer % self.layers_per_block]

    def block_of(self, layer: int) -> int:
        return layer // self.layers_per_block

    def full_attention_layers(self) -> list[int]:
        return [b * self.layers_per_block for b in range(self.num_blocks)]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["layer_pattern"] = [k.value for k in self.layer_pattern]
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        try:
            pattern = tuple(SublayerKind(k) for k in data.get("layer_pattern", ()))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            return cls(**{**data, "layer_pattern": pattern})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class ScoreConfig:
    """Importance-scoring and selection hyperparameters.

    query_window_n: number of trailing query rows used for scoring.
    block_size_g: selection granularity in tokens.
    sink_count_a: leading tokens that are always kept.
    top_p: cumulative score fraction to retain.
    """

    query_window_n: int = 128
    block_size_g: int = 64
    sink_count_a: int = 128
    top_p: float = 0.99

    def __post_init__(self) -> None:
        if self.query_window_n < 0:
            raise ConfigError("query_window_n must be non-negative")
        if self.block_size_g <= 0:
            raise ConfigError("block_size_g must be positive")
        if self.sink_count_a < 0:
            raise ConfigError("sink_count_a must be non-negative")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")

    def effective_n(self, num_tokens: int) -> int:
        return min(self.query_window_n, num_tokens)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScoreConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ScoreConfig fields: {sorted(unknown)}")
        return cls(**data)


def load_model_config(path: str | Path) -> ModelConfig:
    return ModelConfig.from_dict(json.loads(Path(path).read_text()))


def load_score_config(path: str | Path) -> ScoreConfig:
    return ScoreConfig.from_dict(json.loads(Path(path).read_text()))


FA = SublayerKind.FULL_ATTENTION
SWA = SublayerKind.SLIDING_WINDOW_ATTENTION
LIN = SublayerKind.LINEAR_ATTENTION
FFN = SublayerKind.FFN

# Repeating blocks for the three reference architectures: full attention
# everywhere, 3:1 linear/full, and 5:1 sliding-window/full.
ARCHETYPE_PATTERNS: dict[str, tuple[SublayerKind, ...]] = {
    "full": (FA, FFN),
    "linear_hybrid": (FA, FFN, LIN, FFN, LIN, FFN, LIN, FFN),
    "swa_hybrid": (FA, FFN) + (SWA, FFN) * 5,
}


def archetype(name: str, *, num_blocks: int = 2, hidden_dim: int = 64, num_heads: int = 8,
              window_size: int = 32, ffn_dim: int = 128, vocab_size: int = 128,
              seed: int = 0, init_std: float = 0.02) -> ModelConfig:
    try:
        pattern = ARCHETYPE_PATTERNS[name]
    except KeyError:
        raise ConfigError(f"unknown archetype {name!r}; choose from {sorted(ARCHETYPE_PATTERNS)}") from None
    if hidden_dim % num_heads:
        raise ConfigError(f"hidden_dim ({hidden_dim}) not divisible by num_heads ({num_heads})")
    return ModelConfig(
        num_blocks=num_blocks,
        sublayers_per_block=len(pattern) - 1,
        layer_pattern=pattern,
        hidden_dim=hidden_dim,
        head_dim=hidden_dim // num_heads,
        num_heads=num_heads,
        window_size=window_size,
        ffn_dim=ffn_dim,
        vocab_size=vocab_size,
        seed=seed,
        init_std=init_std,
    )


@dataclass
class EngineOptions:
    """Knobs for the accelerated path that are not scoring hyperparameters."""

    drop_layers: frozenset[int] | None = None  # None: every full-attention layer
    readmit: bool = True
    tp: int = 1
    token_budget: int = 8192
    audit: bool = False
