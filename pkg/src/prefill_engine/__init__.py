"""Desk-scale prefill engine with importance-based token dropping."""

from .config import (ConfigError, EngineOptions, ModelConfig, ScoreConfig, SublayerKind, archetype,
                     load_model_config, load_score_config)
from .kvcache import PagedKVCache, decode_seqused
from .model import Model, build_model, dense_prefill, forward_sublayer
from .propagation import DropHistory, TokenStream, accelerated_prefill, apply_drop, reconstitute
from .selection import Selection, phi_encode, top_p_select

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "EngineOptions", "ModelConfig", "ScoreConfig", "SublayerKind", "archetype",
    "load_model_config", "load_score_config", "PagedKVCache", "decode_seqused", "Model",
    "build_model", "dense_prefill", "forward_sublayer", "DropHistory", "TokenStream",
    "accelerated_prefill", "apply_drop", "reconstitute", "Selection", "phi_encode", "top_p_select",
]
