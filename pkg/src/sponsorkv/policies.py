"""Per-sequence retention policies.

This module is the readable, per-position reference: each ``*_step``
function takes the cache after a new token has been appended (``K + 1``
candidates at most) and returns the cache after eviction. The simulator
runs a vectorised engine over many sequences at once; the test-suite checks
it against these functions step by step.

Tie-breaking: when two candidates score the same, the higher position wins.
In ``random`` tie mode, sponsored tokens first compare a per-anchor rank
drawn from the counter-based generator, which makes equally sponsored spans
indistinguishable except by chance.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace

from . import hashrng
from .anchors import AnchorEvent
from .errors import ConfigError, InvariantError
from .core_scoring import DEFAULT_EMA, PRESETS, TokenRecord, UtilityWeights, compute_utility, update_pension
from .sponsorship import (DEFAULT_BUDGET, DEFAULT_SPAN, OFFSET_DECAY, SponsorLedger, allocate_vouchers,
                          decay_budgets)

POLICY_NAMES = (
    "ta-full", "ta-fast-regex", "ta-fast-semantic", "ta-fast-embedding",
    "ta-learned", "ta-learnrank", "h2o", "tova", "streaming",
)

PARTITION_RULES = ("default", "strict", "max")


@dataclass(frozen=True)
class Partition:
    main: int
    protected: int

    @property
    def total(self) -> int:
        return self.main + self.protected


def partition_budget(K: int, rule: str = "default", mandatory_count: int = 0) -> Partition:
    """Split ``K`` into utility-selected and sponsor-protected slots.

    ``default`` reserves a quarter of the budget (12/4 at K=16, 48/16 at K=64);
    ``strict`` reserves nothing; ``max`` reserves every non-mandatory slot.
    """
    if K < 3:
        raise ConfigError(f"budget K={K} is below the 3 mandatory slots")
    if rule == "default":
        protected = K // 4
    elif rule == "strict":
        protected = 0
    elif rule == "max":
        protected = max(K - mandatory_count, 0)
    else:
        raise ConfigError(f"unknown partition rule {rule!r}; choose from {PARTITION_RULES}")
    return Partition(K - protected, protected)


@dataclass(frozen=True)
class BaselineConfig:
    """Sinks plus a recency window. ``window=None`` fills the rest of the budget."""

    sink_count: int = 4
    window: int | None = None

    def __post_init__(self) -> None:
        if self.sink_count < 0 or (self.window is not None and self.window < 0):
            raise ConfigError("sink_count and window must be non-negative")

    def resolve(self, K: int) -> tuple[int, int]:
        """Sinks and window at budget ``K``; a window that does not fit is clipped."""
        sinks = min(self.sink_count, K)
        window = K - sinks if self.window is None else min(self.window, K - sinks)
        return sinks, window


TOVA_DEFAULT = BaselineConfig(4, 12)
STREAMING_DEFAULT = BaselineConfig(4, None)


@dataclass(frozen=True)
class TAConfig:
    weights: UtilityWeights = PRESETS["ta-fast"]
    span: int = DEFAULT_SPAN
    budget: float = DEFAULT_BUDGET
    sinks: int = 1
    window: int = 2
    partition: str = "default"
    tie_break: str = "position"
    ranked: bool = False
    dilution: bool = False
    ema: float = DEFAULT_EMA
    tie_seed: int = 0

    def __post_init__(self) -> None:
        if self.tie_break not in ("position", "random"):
            raise ConfigError(f"tie_break must be 'position' or 'random', got {self.tie_break!r}")
        if self.partition not in PARTITION_RULES:
            raise ConfigError(f"unknown partition rule {self.partition!r}")
        if self.span < 1 or self.sinks < 0 or self.window < 0 or self.budget < 0:
            raise ConfigError("span must be >= 1; sinks, window and budget non-negative")

    def mandatory_layout(self, K: int) -> tuple[int, int]:
        sinks = min(self.sinks, K)
        return sinks, min(self.window, K - sinks)


@dataclass
class CacheState:
    retained: list[int]
    budget: int
    partition: Partition
    mandatory: frozenset[int] = frozenset()

    def check(self) -> None:
        if len(self.retained) > self.budget:
            raise InvariantError(f"{len(self.retained)} tokens retained with budget {self.budget}")
        if not self.mandatory <= set(self.retained):
            raise InvariantError(f"mandatory tokens evicted: {sorted(self.mandatory - set(self.retained))}")
        if self.partition.total != self.budget:
            raise InvariantError("partition does not sum to the budget")


def empty_state(K: int, partition: Partition | None = None) -> CacheState:
    return CacheState([], K, partition or Partition(K, 0))


def mandatory_positions(positions: Iterable[int], sinks: int, window: int) -> frozenset[int]:
    """The ``sinks`` oldest and ``window`` newest of ``positions``."""
    ordered = sorted(positions)
    head = ordered[:sinks]
    tail = ordered[len(ordered) - window:] if window > 0 else []
    return frozenset(head) | frozenset(tail)


def _top(keys: Mapping[int, tuple], count: int) -> list[int]:
    if count <= 0:
        return []
    return sorted(keys, key=lambda p: keys[p], reverse=True)[:count]


def select_top_k(utilities: Mapping[int, float], K: int, mandatory: Iterable[int] = (),
                 tie_keys: Mapping[int, float] | None = None) -> set[int]:
    """Mandatory positions plus the best-scoring others, ``K`` in total."""
    mandatory = set(mandatory)
    if len(mandatory) > K:
        raise ConfigError(f"{len(mandatory)} mandatory tokens exceed budget K={K}")
    missing = mandatory - set(utilities)
    if missing:
        raise ConfigError(f"mandatory positions without a utility: {sorted(missing)}")
    tie_keys = tie_keys or {}
    keys = {p: (u, tie_keys.get(p, 0.0), p) for p, u in utilities.items() if p not in mandatory}
    return mandatory | set(_top(keys, K - len(mandatory)))


def anchor_rank(seed: int, anchor_position: int) -> float:
    """Per-anchor random tie rank in (0, 1), a pure function of its inputs."""
    return float(hashrng.uniform(seed, 0x7A1E, anchor_position))


def _span_ranks(ledger: SponsorLedger, positions: Iterable[int], seed: int) -> dict[int, float]:
    out: dict[int, float] = {}
    for e in ledger:
        r = anchor_rank(seed, e.anchor_position)
        for p in positions:
            if 0 < p - e.anchor_position <= e.span:
                out[p] = max(out.get(p, 0.0), r)
    return out


def diluted_ledger(ledger: SponsorLedger, records: Mapping[int, TokenRecord]) -> SponsorLedger:
    """Scale each anchor's budget by its share of the anchors' cumulative attention.

    Approximates attention-weighted sponsorship: with one anchor nothing
    changes, with several similar ones protection is spread thin.
    """
    if len(ledger) < 2:
        return ledger
    mass = {e.anchor_position: records[e.anchor_position].cumulative_attention
            if e.anchor_position in records else 0.0 for e in ledger}
    total = sum(mass.values())
    out = SponsorLedger()
    for e in ledger:
        share = mass[e.anchor_position] / total if total > 0 else 1.0 / len(ledger)
        out.entries[e.anchor_position] = replace(e, budget=e.budget * share)
    return out


def ta_step(state: CacheState, records: dict[int, TokenRecord], ledger: SponsorLedger,
            config: TAConfig, *, events: Iterable[AnchorEvent] = (),
            attention: Mapping[int, float] | None = None, generation: bool = False,
            anchor_attention: Mapping[int, float] | None = None) -> CacheState:
    """One step of sponsored retention.

    ``records`` holds every position seen so far (evicted ones keep their
    frozen statistics); the newest position is the largest key.
    ``events`` are the anchors detected on the new token, ``attention`` the
    current row over cached positions. Budgets decay only on generation steps.
    """
    t = max(records)
    K = state.budget
    candidates = sorted(set(state.retained) | {t})

    # detect anchors
    for ev in events:
        records[ev.position].is_anchor = True
        if config.ranked:
            if ev.confidence > 0.3:
                ledger.sponsor(ev.position, ev.confidence * config.budget, config.span, ev.confidence)
        else:
            ledger.sponsor(ev.position, config.budget, config.span, ev.confidence)

    # attention statistics
    if attention is not None:
        for p, a in attention.items():
            rec = records[p]
            rec.cumulative_attention += a
            rec.pension = update_pension(rec.pension, a, config.ema)

    # vouchers
    active = diluted_ledger(ledger, records) if config.dilution else ledger
    vouchers = allocate_vouchers(active, max(t, active.max_sponsored()))
    for p in candidates:
        rec = records[p]
        rec.voucher = vouchers.get(p, 0.0)
        rec.recency = p / t

    sinks, window = config.mandatory_layout(K)
    partition = partition_budget(K, config.partition, sinks + window) if K >= 3 else Partition(K, 0)
    if len(candidates) <= K:
        retained = candidates
    else:
        mandatory = mandatory_positions(candidates, sinks, window)
        utilities = {p: compute_utility(records[p], config.weights) for p in candidates}
        ranks = _span_ranks(active, candidates, config.tie_seed) if config.tie_break == "random" else {}
        others = [p for p in candidates if p not in mandatory]
        sponsored = {p: (records[p].voucher, ranks.get(p, 0.0), p) for p in others if records[p].voucher > 0}
        protected = _top(sponsored, min(partition.protected, K - len(mandatory)))
        rest = {p: (utilities[p], ranks.get(p, 0.0), p) for p in others if p not in protected}
        main = _top(rest, K - len(mandatory) - len(protected))
        retained = sorted(mandatory | set(protected) | set(main))

    if generation:
        ledger.entries = decay_budgets(ledger).entries

    new = CacheState(retained, K, partition, mandatory_positions(retained, sinks, window)
                     if len(candidates) > K else frozenset())
    new.check()
    return new


def h2o_step(state: CacheState, records: Mapping[int, TokenRecord],
             attention: Mapping[int, float] | None = None) -> CacheState:
    """Heavy hitters only: keep the ``K`` largest cumulative attentions."""
    t = max(records)
    candidates = sorted(set(state.retained) | {t})
    if attention is not None:
        for p, a in attention.items():
            records[p].cumulative_attention += a
    K = state.budget
    if len(candidates) > K:
        keys = {p: (records[p].cumulative_attention, 0.0, p) for p in candidates}
        candidates = sorted(_top(keys, K))
    return CacheState(candidates, K, Partition(K, 0))


def _window_step(state: CacheState, t: int, cfg: BaselineConfig,
                 attention: Mapping[int, float] | None) -> CacheState:
    K = state.budget
    candidates = sorted(set(state.retained) | {t})
    sinks, window = cfg.resolve(K)
    if len(candidates) <= K:
        return CacheState(candidates, K, Partition(K, 0))
    mandatory = mandatory_positions(candidates, sinks, window)
    others = [p for p in candidates if p not in mandatory]
    free = K - len(mandatory)
    if attention is None:
        # oldest-first eviction
        kept = sorted(others)[len(others) - free:] if free > 0 else []
    else:
        keys = {p: (attention[p], 0.0, p) for p in others}
        kept = _top(keys, free)
    retained = sorted(mandatory | set(kept))
    return CacheState(retained, K, Partition(K, 0), mandatory)


def tova_step(state: CacheState, records: Mapping[int, TokenRecord], cfg: BaselineConfig = TOVA_DEFAULT,
              attention: Mapping[int, float] | None = None) -> CacheState:
    """Sinks and window are kept; the remaining slot holder with the lowest
    attention at this step is evicted."""
    if attention is None:
        raise ConfigError("tova_step needs the current attention row")
    t = max(records)
    for p, a in attention.items():
        records[p].cumulative_attention += a
    return _window_step(state, t, cfg, attention)


def streaming_step(state: CacheState, records: Mapping[int, TokenRecord],
                   cfg: BaselineConfig = STREAMING_DEFAULT, attention: Mapping[int, float] | None = None
                   ) -> CacheState:
    t = max(records)
    if attention is not None:
        for p, a in attention.items():
            records[p].cumulative_attention += a
    return _window_step(state, t, cfg, None)


DETECTORS = ("regex", "semantic", "embedding", "learned")


@dataclass(frozen=True)
class PolicySpec:
    """A named policy: its family, detector and configuration."""

    name: str
    kind: str  # "ta", "h2o", "tova" or "streaming"
    detector: str | None = None
    ta: TAConfig | None = None
    baseline: BaselineConfig | None = None

    @property
    def uses_anchors(self) -> bool:
        return self.kind == "ta"


_TA_DETECTORS = {
    "ta-full": ("regex", "full-ta"),
    "ta-fast-regex": ("regex", "ta-fast"),
    "ta-fast-semantic": ("semantic", "ta-fast"),
    "ta-fast-embedding": ("embedding", "ta-fast"),
    "ta-learned": ("learned", "ta-fast"),
    "ta-learnrank": ("learned", "ta-fast"),
}


def make_policy(name: str, ta: TAConfig | None = None, baseline: BaselineConfig | None = None,
                weights: UtilityWeights | None = None) -> PolicySpec:
    """Build a policy by name.

    ``ta`` supplies span, budget and layout for the sponsored policies; its
    weights are replaced by the policy's preset unless ``weights`` is given.
    ``ta-full`` spreads each anchor's budget by attention share, and
    ``ta-learnrank`` scales budgets by detector confidence.
    """
    if name in _TA_DETECTORS:
        detector, preset_name = _TA_DETECTORS[name]
        cfg = ta or TAConfig()
        cfg = replace(cfg, weights=weights or PRESETS[preset_name],
                      ranked=name == "ta-learnrank", dilution=name == "ta-full")
        return PolicySpec(name, "ta", detector, cfg)
    if name == "h2o":
        return PolicySpec(name, "h2o")
    if name == "tova":
        return PolicySpec(name, "tova", baseline=baseline or TOVA_DEFAULT)
    if name == "streaming":
        return PolicySpec(name, "streaming", baseline=baseline or STREAMING_DEFAULT)
    raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")


@dataclass
class SequenceRun:
    """Drives one policy over one token stream, position by position."""

    policy: str
    K: int
    ta: TAConfig | None = None
    baseline: BaselineConfig | None = None
    records: dict[int, TokenRecord] = field(default_factory=dict)
    ledger: SponsorLedger = field(default_factory=SponsorLedger)
    state: CacheState | None = None

    def __post_init__(self) -> None:
        if self.state is None:
            self.state = empty_state(self.K)

    def push(self, token_id: int, frequency_penalty: float = 0.0, *, events: Iterable[AnchorEvent] = (),
             attention: Mapping[int, float] | None = None, generation: bool = False) -> CacheState:
        t = len(self.records) + 1
        self.records[t] = TokenRecord(t, token_id, frequency_penalty=frequency_penalty)
        if self.policy == "h2o":
            self.state = h2o_step(self.state, self.records, attention)
        elif self.policy == "tova":
            self.state = tova_step(self.state, self.records, self.baseline or TOVA_DEFAULT, attention)
        elif self.policy == "streaming":
            self.state = streaming_step(self.state, self.records, self.baseline or STREAMING_DEFAULT, attention)
        else:
            self.state = ta_step(self.state, self.records, self.ledger, self.ta or TAConfig(),
                                 events=events, attention=attention, generation=generation)
        return self.state


__all__ = [
    "BaselineConfig", "CacheState", "Partition", "PolicySpec", "SequenceRun", "TAConfig", "POLICY_NAMES",
    "make_policy",
    "h2o_step", "mandatory_positions", "partition_budget", "select_top_k", "streaming_step",
    "ta_step", "tova_step", "OFFSET_DECAY",
]
