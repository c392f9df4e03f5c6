"""Seeded workload files and the prompt content they describe.

A workload is a JSON list of entries
``{arrival_step, prompt_length, max_new_tokens, content_kind, ...}``. The
prompt content itself is not stored; it is regenerated from the workload
seed and the entry index, so the same file always means the same prompts.

Content kinds:

* ``random``: uniform token ids.
* ``needle``: random filler ids with a needle token run planted at the
  given relative depths (``needle_depths``, default ``[0.5]``).
* ``low_entropy``: embedding rows, blank (all-zero) filler with random
  content only in the first ``LOW_ENTROPY_HEAD`` and last
  ``LOW_ENTROPY_TAIL`` positions; attention concentrates on those.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, ModelConfig

CONTENT_KINDS = ("random", "needle", "low_entropy")
LOW_ENTROPY_HEAD = 128
LOW_ENTROPY_TAIL = 128
NEEDLE_LENGTH = 4
FILLER_VOCAB_FRACTION = 0.5  # filler ids come from the lower half, needles from the upper

DEFAULT_SPEC = {
    "seed": 0,
    "num_requests": 4,
    "arrival": "poisson",
    "rate": 0.5,
    "prompt_lengths": [256, 512],
    "max_new_tokens": [4, 16],
    "content_kinds": ["random"],
}


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def gen_workload(spec: dict[str, Any]) -> list[dict[str, Any]]:
    s = {**DEFAULT_SPEC, **spec}
    unknown = set(spec) - set(DEFAULT_SPEC) - {"needle_depths"}
    if unknown:
        raise ConfigError(f"unknown workload spec fields: {sorted(unknown)}")
    kinds = list(s["content_kinds"])
    for k in kinds:
        if k not in CONTENT_KINDS:
            raise ConfigError(f"unknown content kind {k!r}")
    rng = _rng(int(s["seed"]), 0)
    n = int(s["num_requests"])
    if s["arrival"] == "poisson":
        gaps = rng.poisson(1.0 / float(s["rate"]), size=n) if float(s["rate"]) > 0 else np.zeros(n, int)
        arrivals = np.concatenate([[0], np.cumsum(gaps[1:])]).astype(int) if n else np.zeros(0, int)
    elif s["arrival"] == "fixed":
        arrivals = np.zeros(n, int)
    else:
        raise ConfigError(f"unknown arrival pattern {s['arrival']!r}")
    lengths = list(s["prompt_lengths"])
    lo, hi = s["max_new_tokens"] if isinstance(s["max_new_tokens"], list) else (s["max_new_tokens"],) * 2
    out = []
    for i in range(n):
        entry = {
            "arrival_step": int(arrivals[i]),
            "prompt_length": int(lengths[int(rng.integers(len(lengths)))]),
            "max_new_tokens": int(rng.integers(int(lo), int(hi) + 1)),
            "content_kind": kinds[int(rng.integers(len(kinds)))],
        }
        if entry["content_kind"] == "needle":
            entry["needle_depths"] = list(s.get("needle_depths", [0.5]))
        out.append(entry)
    return out


def dumps_workload(entries: list[dict], seed: int) -> str:
    return json.dumps({"seed": seed, "requests": entries}, indent=2, sort_keys=True) + "\n"


def load_workload(path: str | Path) -> tuple[int, list[dict]]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return 0, data
    return int(data.get("seed", 0)), list(data["requests"])


def needle_positions(length: int, depths: list[float], needle_length: int = NEEDLE_LENGTH) -> list[int]:
    """Start positions of needle runs at relative ``depths`` of a prompt of ``length`` tokens."""
    out = []
    for d in depths:
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"needle depth {d} outside [0, 1]")
        out.append(min(int(d * length), max(0, length - needle_length)))
    return out


def needle_ids(vocab_size: int, rng: np.random.Generator, count: int = NEEDLE_LENGTH) -> np.ndarray:
    lo = int(vocab_size * FILLER_VOCAB_FRACTION)
    return rng.integers(lo, vocab_size, count)


def filler_ids(vocab_size: int, rng: np.random.Generator, length: int) -> np.ndarray:
    return rng.integers(0, max(1, int(vocab_size * FILLER_VOCAB_FRACTION)), length)


def low_entropy_rows(hidden_dim: int, length: int, rng: np.random.Generator,
                     head: int = LOW_ENTROPY_HEAD, tail: int = LOW_ENTROPY_TAIL) -> np.ndarray:
    x = np.zeros((length, hidden_dim), np.float32)
    h = min(head, length)
    x[:h] = rng.standard_normal((h, hidden_dim))
    t = min(tail, length - h)
    if t > 0:
        x[length - t:] = rng.standard_normal((t, hidden_dim))
    return x


def materialize(entry: dict, index: int, seed: int, config: ModelConfig) -> np.ndarray:
    """Prompt for one workload entry: token ids, or embedding rows for ``low_entropy``."""
    rng = _rng(seed, 1, index)
    n = int(entry["prompt_length"])
    if n < 1:
        raise ConfigError("prompt_length must be positive")
    kind = entry.get("content_kind", "random")
    if kind == "random":
        return rng.integers(0, config.vocab_size, n)
    if kind == "needle":
        ids = filler_ids(config.vocab_size, rng, n)
        for p in needle_positions(n, entry.get("needle_depths", [0.5])):
            k = min(NEEDLE_LENGTH, n - p)
            ids[p:p + k] = needle_ids(config.vocab_size, rng, k)
        return ids
    if kind == "low_entropy":
        return low_entropy_rows(config.hidden_dim, n, rng)
    raise ConfigError(f"unknown content kind {kind!r}")
