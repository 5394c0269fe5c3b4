"""Per-token statistics and the composite retention utility.

The utility of a cached position is

    u = alpha*A + beta*R + gamma*S + delta*P - lambda*F + V

with A the raw cumulative attention, R = i/n recency, S the anchor flag,
P an exponential moving average of per-step attention, F a repetition
penalty and V the sponsorship voucher. The attention-free preset sets
alpha = delta = 0.
"""

from __future__ import annotations

import configparser
import math
from collections.abc import Mapping
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, ScoringError

DEFAULT_EMA = 0.99


@dataclass
class TokenRecord:
    position: int
    token_id: int
    cumulative_attention: float = 0.0
    recency: float = 0.0
    is_anchor: bool = False
    pension: float = 0.0
    frequency_penalty: float = 0.0
    voucher: float = 0.0


@dataclass(frozen=True)
class UtilityWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.3
    delta: float = 0.2
    lam: float = 0.1

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"weight {f.name} must be a finite non-negative real, got {v!r}")

    @property
    def uses_attention(self) -> bool:
        return self.alpha > 0 or self.delta > 0

    def scaled(self, name: str, factor: float) -> UtilityWeights:
        """Copy with one weight multiplied by ``factor``."""
        key = _WEIGHT_ALIASES.get(name, name)
        if key not in _WEIGHT_NAMES:
            raise ConfigError(f"unknown utility weight {name!r}")
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values[key] *= factor
        return UtilityWeights(**values)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_WEIGHT_NAMES = ("alpha", "beta", "gamma", "delta", "lam")
_WEIGHT_ALIASES = {"lambda": "lam"}

PRESETS: dict[str, UtilityWeights] = {
    "full-ta": UtilityWeights(1.0, 0.5, 0.3, 0.2, 0.1),
    "ta-fast": UtilityWeights(0.0, 0.5, 0.3, 0.0, 0.1),
}


def preset(name: str) -> UtilityWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown weight preset {name!r}; choose from {sorted(PRESETS)}") from None


def weights_from_mapping(values: Mapping[str, str | float], base: UtilityWeights | None = None) -> UtilityWeights:
    """Build weights from key-value pairs, starting from ``base`` (or a preset named by ``preset``)."""
    values = dict(values)
    if "preset" in values:
        base = preset(str(values.pop("preset")).strip())
    current = (base or PRESETS["full-ta"]).as_dict()
    for key, raw in values.items():
        name = _WEIGHT_ALIASES.get(key, key)
        if name not in _WEIGHT_NAMES:
            raise ConfigError(f"unknown utility weight {key!r}")
        try:
            current[name] = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"weight {key!r} is not a decimal real: {raw!r}") from None
    return UtilityWeights(**current)


def load_weights(path: str | Path) -> UtilityWeights:
    """Read a ``[weights]`` section from an INI-style file.

    Keys are alpha, beta, gamma, delta and lambda; an optional ``preset``
    key names the starting point ("full-ta" or "ta-fast").
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read weights file {path}: {exc}") from exc
    if not parser.has_section("weights"):
        raise ConfigError(f"{path}: missing [weights] section")
    return weights_from_mapping(dict(parser.items("weights")))


def compute_utility(record: TokenRecord, w: UtilityWeights) -> float:
    terms = (
        record.cumulative_attention,
        record.recency,
        record.pension,
        record.frequency_penalty,
        record.voucher,
    )
    if not all(math.isfinite(x) for x in terms):
        raise ScoringError(f"non-finite statistic at position {record.position}")
    return (
        w.alpha * record.cumulative_attention
        + w.beta * record.recency
        + w.gamma * (1.0 if record.is_anchor else 0.0)
        + w.delta * record.pension
        - w.lam * record.frequency_penalty
        + record.voucher
    )


def update_pension(old_pension: float, step_attention: float, ema_coefficient: float = DEFAULT_EMA) -> float:
    if not 0.0 < ema_coefficient < 1.0:
        raise ConfigError(f"EMA coefficient must lie in (0, 1), got {ema_coefficient!r}")
    return ema_coefficient * old_pension + (1.0 - ema_coefficient) * step_attention


def update_frequency_penalty(counts: Mapping[int, int], token_id: int) -> float:
    """Repetition penalty for a token whose occurrences so far are in ``counts``.

    The first occurrence is free; every repeat adds one.
    """
    return float(max(counts.get(token_id, 0) - 1, 0))
