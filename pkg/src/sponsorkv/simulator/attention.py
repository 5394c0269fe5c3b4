"""Seeded attention traces with dormant value spans.

Logits for a cached position p at step t are

    salience(p) + noise * (2 U(seed, t, p) - 1) - recency * log(1 + t - p)
        + sink_boost * [p == 1] - suppress * [p dormant]

where salience(p) = salience * U(seed, p) is fixed per position and U is the
counter-based uniform generator; the sink is exempt from the distance term.
A row is the softmax of these logits over the positions currently cached.
Salience and noise are bounded, so no filler gets an unbounded share of a
row. With ``recency > 1`` distant tokens fade fast enough that a filler's
cumulative attention also stays bounded however long it is cached. The
suppression keeps value spans below any reasonable dormancy threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import hashrng
from ..errors import ConfigError

_SALIENCE_KEY = 0x5A1
_NOISE_KEY = 0x7015E


@dataclass(frozen=True)
class AttentionModel:
    epsilon: float = 1e-3
    salience: float = 2.0
    noise: float = 1.0
    recency: float = 0.0
    sink_boost: float = 4.0
    suppress: float = 30.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError("dormancy threshold epsilon must be positive")
        if min(self.salience, self.noise, self.recency, self.sink_boost, self.suppress) < 0:
            raise ConfigError("attention model parameters must be non-negative")


def base_logits(seed: int, dormant: np.ndarray, model: AttentionModel) -> np.ndarray:
    """Step-independent part of the logits, indexed by position (slot 0 unused)."""
    pos = np.arange(dormant.size)
    out = model.salience * hashrng.uniform(seed, _SALIENCE_KEY, pos)
    if dormant.size > 1:
        out[1] += model.sink_boost
    out[dormant] -= model.suppress
    out[0] = 0.0
    return out


def attention_rows(seeds: np.ndarray, step: int, positions: np.ndarray, base: np.ndarray,
                   model: AttentionModel) -> np.ndarray:
    """Softmax rows for a batch: ``positions`` and ``base`` are ``(B, C)`` and ``(B, n+1)``."""
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    logits = np.take_along_axis(base, positions, axis=1)
    if model.noise:
        logits = logits + model.noise * (2.0 * hashrng.uniform(seeds, _NOISE_KEY, step, positions) - 1.0)
    if model.recency:
        logits = logits - model.recency * np.where(positions == 1, 0.0, np.log1p(step - positions))
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def synth_attention(workload, step: int, positions=None) -> np.ndarray:
    """Attention row at ``step`` over ``positions`` (all of ``1..step`` by default)."""
    if not 1 <= step <= workload.n:
        raise ConfigError(f"step {step} outside 1..{workload.n}")
    positions = np.arange(1, step + 1) if positions is None else np.asarray(positions, dtype=np.int64)
    model = workload.config.attention
    base = base_logits(workload.seed, workload.dormant_mask(), model)
    return attention_rows(np.array([workload.seed]), step, positions[None, :], base[None, :], model)[0]
