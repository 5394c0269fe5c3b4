"""Sponsor ledger: anchors lend exponentially decaying vouchers to the tokens after them."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

OFFSET_DECAY = 0.8
STEP_DECAY = 0.9
PRUNE_FLOOR = 1e-6
DEFAULT_BUDGET = 15.0
DEFAULT_SPAN = 6
RANK_FLOOR = 0.3


@dataclass(frozen=True)
class SponsorEntry:
    anchor_position: int
    budget: float
    confidence: float = 1.0
    span: int = DEFAULT_SPAN

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ConfigError(f"negative sponsor budget {self.budget}")
        if self.span < 1:
            raise ConfigError(f"sponsor span must be >= 1, got {self.span}")

    def voucher(self, position: int) -> float:
        offset = position - self.anchor_position
        if 0 < offset <= self.span:
            return self.budget * OFFSET_DECAY**offset
        return 0.0


@dataclass
class SponsorLedger:
    """Active anchors keyed by position; at most one entry per anchor."""

    entries: dict[int, SponsorEntry] = field(default_factory=dict)

    def sponsor(self, position: int, budget: float = DEFAULT_BUDGET, span: int = DEFAULT_SPAN,
                confidence: float = 1.0) -> None:
        # re-detection resets to the initial budget instead of stacking
        self.entries[position] = SponsorEntry(position, budget, confidence, span)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries.values(), key=lambda e: e.anchor_position))

    def max_sponsored(self) -> int:
        return max((e.anchor_position + e.span for e in self.entries.values()), default=0)

    def to_records(self) -> list[dict]:
        return [
            {"anchor_position": e.anchor_position, "budget": e.budget,
             "confidence": e.confidence, "span": e.span}
            for e in self
        ]

    @classmethod
    def from_records(cls, records) -> SponsorLedger:
        ledger = cls()
        for r in records:
            ledger.sponsor(int(r["anchor_position"]), float(r["budget"]), int(r["span"]),
                           float(r.get("confidence", 1.0)))
        return ledger


def allocate_vouchers(ledger: SponsorLedger, n: int) -> dict[int, float]:
    """Voucher for every sponsored position in ``[1, n]``; unlisted positions hold zero.

    Overlapping spans add.
    """
    if n < ledger.max_sponsored():
        raise ConfigError(f"n={n} is smaller than the last sponsored position {ledger.max_sponsored()}")
    out: dict[int, float] = {}
    for e in ledger:
        for j in range(e.anchor_position + 1, e.anchor_position + e.span + 1):
            out[j] = out.get(j, 0.0) + e.budget * OFFSET_DECAY ** (j - e.anchor_position)
    return out


def voucher_array(ledger: SponsorLedger, n: int) -> np.ndarray:
    """Dense form of :func:`allocate_vouchers`, indexed by position (slot 0 unused)."""
    v = np.zeros(n + 1)
    for j, x in allocate_vouchers(ledger, n).items():
        v[j] = x
    return v


def allocate_vouchers_ranked(confidences: Mapping[int, float], budget: float = DEFAULT_BUDGET,
                             span: int = DEFAULT_SPAN, floor: float = RANK_FLOOR) -> dict[int, float]:
    """Confidence-proportional sponsorship; anchors at or below ``floor`` sponsor nothing."""
    out: dict[int, float] = {}
    for i in sorted(confidences):
        f = confidences[i]
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"confidence at {i} outside [0, 1]: {f}")
        if f <= floor:
            continue
        for j in range(i + 1, i + span + 1):
            out[j] = out.get(j, 0.0) + f * budget * OFFSET_DECAY ** (j - i)
    return out


def decay_budgets(ledger: SponsorLedger, factor: float = STEP_DECAY,
                  prune_floor: float = PRUNE_FLOOR) -> SponsorLedger:
    """One step of budget decay; entries that fall below ``prune_floor`` are dropped."""
    kept = {}
    for pos, e in ledger.entries.items():
        b = e.budget * factor
        if b >= prune_floor:
            kept[pos] = replace(e, budget=b)
    return SponsorLedger(kept)
