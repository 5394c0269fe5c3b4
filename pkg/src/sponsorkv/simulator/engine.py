"""Vectorised retention engine: many independent trials advanced in lockstep.

Each trial keeps its cache as a sorted row of positions; the batch is a
``(B, K + 1)`` integer array. Every step appends the new position, adds the
step's attention row to the cached positions' statistics and, once the
cache overflows, evicts exactly one column per row. Eviction rules and tie
orders are those of :mod:`sponsorkv.policies`, which the tests replay step
by step against this engine.

Trials stop at the last position before the query, where retention is
measured; sponsor budgets only decay during generation, which lies beyond
that point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import hashrng
from ..errors import InvariantError, TrialError
from ..policies import PolicySpec, anchor_rank, make_policy, partition_budget
from ..sponsorship import OFFSET_DECAY
from .attention import attention_rows, base_logits
from .detect import anchor_events
from .workload import Workload


@dataclass(frozen=True)
class TrialResult:
    policy_name: str
    K: int
    seed: int
    needle_retained: bool
    needle_tokens_retained: int
    needle_rank: int
    retained_history_digest: str
    steps: int
    final_retained: tuple[int, ...] = field(repr=False)
    needle_attention: float = 0.0

    def __post_init__(self) -> None:
        if self.needle_retained and self.needle_tokens_retained == 0:
            raise InvariantError("retained needle with no retained needle tokens")


def _lex_argmin(keys: list[np.ndarray], allowed: np.ndarray) -> np.ndarray:
    """Column of the lexicographically smallest key tuple among ``allowed`` cells, per row."""
    m = allowed.copy()
    for k in keys:
        kk = np.where(m, k, np.inf)
        m &= kk == kk.min(axis=1, keepdims=True)
    return m.argmax(axis=1)


@dataclass
class _Batch:
    """Per-trial static arrays, indexed ``[trial, position]``."""

    seeds: np.ndarray
    base: np.ndarray
    freq: np.ndarray
    anchor_flag: np.ndarray
    voucher: np.ndarray | None  # static vouchers when budgets never change
    tie: np.ndarray
    anchor_pos: np.ndarray  # (B, M) anchor positions, 0 = padding
    anchor_budget: np.ndarray  # (B, M)
    needle: list[range]


def _prepare(spec: PolicySpec, workloads: list[Workload], patterns) -> _Batch:
    B = len(workloads)
    T = workloads[0].query_position - 1
    seeds = np.array([w.seed for w in workloads], dtype=np.uint64)
    base = np.zeros((B, T + 1))
    freq = np.zeros((B, T + 1))
    flag = np.zeros((B, T + 1))
    tie = np.zeros((B, T + 1))
    events: list[list[tuple[int, float]]] = []
    ta = spec.ta
    for b, w in enumerate(workloads):
        base[b] = base_logits(w.seed, w.dormant_mask(), w.config.attention)[:T + 1]
        freq[b] = w.frequency_penalties()[:T + 1]
        row: list[tuple[int, float]] = []
        if spec.uses_anchors:
            for ev in anchor_events(w, spec.detector, patterns, T, ta.ranked):
                flag[b, ev.position] = 1.0
                if ta.ranked:
                    if ev.confidence > 0.3:
                        row.append((ev.position, ev.confidence * ta.budget))
                else:
                    row.append((ev.position, ta.budget))
        events.append(row)
    M = max((len(r) for r in events), default=0)
    apos = np.zeros((B, max(M, 1)), dtype=np.int64)
    abud = np.zeros((B, max(M, 1)))
    for b, row in enumerate(events):
        for k, (p, bud) in enumerate(row):
            apos[b, k], abud[b, k] = p, bud
    voucher = None
    if spec.uses_anchors:
        L = ta.span
        powers = np.array([OFFSET_DECAY ** k for k in range(1, L + 1)])
        if not ta.dilution:
            voucher = np.zeros((B, T + 1))
            for b, row in enumerate(events):
                for p, bud in row:
                    hi = min(p + L, T)
                    voucher[b, p + 1:hi + 1] += bud * powers[:hi - p]
        if ta.tie_break == "random":
            for b, row in enumerate(events):
                for p, _ in row:
                    r = anchor_rank(workloads[b].seed, p)
                    seg = tie[b, p + 1:min(p + L, T) + 1]
                    np.maximum(seg, r, out=seg)
    return _Batch(seeds, base, freq, flag, voucher, tie, apos, abud, [w.needle_span for w in workloads])


def _diluted_vouchers(batch: _Batch, A: np.ndarray, pos: np.ndarray, t: int, span: int) -> np.ndarray:
    """Vouchers at ``pos`` with each anchor's budget scaled by its attention share."""
    B = pos.shape[0]
    bidx = np.arange(B)[:, None]
    active = (batch.anchor_pos > 0) & (batch.anchor_pos <= t)
    count = active.sum(axis=1, keepdims=True)
    mass = np.where(active, A[bidx, batch.anchor_pos], 0.0)
    total = mass.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, mass / total, 1.0 / np.maximum(count, 1))
    budget = np.where(count > 1, batch.anchor_budget * share, batch.anchor_budget)
    powers = np.array([0.0] + [OFFSET_DECAY ** k for k in range(1, span + 1)])
    V = np.zeros(pos.shape)
    for a in range(batch.anchor_pos.shape[1]):
        off = pos - batch.anchor_pos[:, a:a + 1]
        inside = active[:, a:a + 1] & (off > 0) & (off <= span)
        V += np.where(inside, budget[:, a:a + 1] * powers[np.clip(off, 0, span)], 0.0)
    return V


def run_batch(spec: PolicySpec, workloads: list[Workload], K: int, patterns=None) -> list[TrialResult]:
    """Run ``spec`` at budget ``K`` over workloads sharing ``n`` and the query position."""
    if not workloads:
        return []
    n, q = workloads[0].n, workloads[0].query_position
    if any(w.n != n or w.query_position != q for w in workloads):
        raise TrialError("a batch must share n and the query position")
    if K < 1:
        raise TrialError(f"budget K={K} must be positive")
    model = workloads[0].config.attention
    T = q - 1
    B = len(workloads)
    batch = _prepare(spec, workloads, patterns)
    bidx = np.arange(B)[:, None]
    rows = np.arange(B)

    ta = spec.ta
    if spec.kind == "ta":
        w = ta.weights
        sinks, window = ta.mandatory_layout(K)
        n_mand = min(sinks + window, K)
        part = partition_budget(K, ta.partition, n_mand)
        kp = min(part.protected, K - n_mand)
        ema = ta.ema
    else:
        ema = 0.99
        if spec.kind in ("tova", "streaming"):
            sinks, window = spec.baseline.resolve(K)
        else:
            sinks, window = 0, 0

    A = np.zeros((B, T + 1))
    P = np.zeros((B, T + 1))
    cache = np.zeros((B, K + 1), dtype=np.int64)
    digest = np.zeros(B, dtype=np.uint64)
    c = 0
    for t in range(1, T + 1):
        cache[:, c] = t
        c += 1
        pos = cache[:, :c]
        att = attention_rows(batch.seeds, t, pos, batch.base, model)
        A[bidx, pos] += att
        P[bidx, pos] = ema * P[bidx, pos] + (1.0 - ema) * att
        if c <= K:
            continue
        posf = pos.astype(float)
        if spec.kind == "h2o":
            col = _lex_argmin([A[bidx, pos], posf], np.ones(pos.shape, dtype=bool))
        else:
            free = np.ones(pos.shape, dtype=bool)
            free[:, :sinks] = False
            if window:
                free[:, c - window:] = False
            if spec.kind == "streaming":
                col = free.argmax(axis=1)
            elif spec.kind == "tova":
                col = _lex_argmin([att, posf], free)
            else:
                col = _ta_evict(batch, A, P, pos, posf, free, t, w, ta.span, kp)
        evicted = pos[rows, col]
        digest = hashrng.hash_u64(digest, t, evicted)
        keep = np.ones(pos.shape, dtype=bool)
        keep[rows, col] = False
        cache[:, :K] = pos[keep].reshape(B, K)
        c = K

    final = cache[:, :c]
    if spec.kind == "ta":
        score = _utilities(batch, A, P, np.broadcast_to(np.arange(T + 1), (B, T + 1)), T, ta)
    else:
        score = A
    out = []
    for b, wl in enumerate(workloads):
        span = np.asarray(batch.needle[b])
        kept = set(final[b].tolist())
        hits = sum(1 for p in span if p in kept)
        needle_att = float(A[b, span].max()) if span.size else 0.0
        if needle_att >= model.epsilon:
            raise TrialError(f"needle attention {needle_att:.3g} reached epsilon {model.epsilon} (seed {wl.seed})")
        s = score[b, 1:]
        best = max(span, key=lambda p: (score[b, p], p))
        rank = 1 + int(np.sum(s > score[b, best])) + int(np.sum((s == score[b, best]) & (np.arange(1, T + 1) > best)))
        out.append(TrialResult(spec.name, K, wl.seed, hits == len(span), hits, rank,
                               f"{int(digest[b]):016x}", T, tuple(final[b].tolist()), needle_att))
        if len(kept) != min(K, T) or not set(range(1, min(sinks, T) + 1)) <= kept:
            raise TrialError(f"cache invariant broken for seed {wl.seed}")
    return out


def _utilities(batch: _Batch, A, P, pos, t, ta) -> np.ndarray:
    B = pos.shape[0]
    bidx = np.arange(B)[:, None]
    if batch.voucher is not None:
        V = batch.voucher[bidx, pos]
    elif ta.dilution:
        V = _diluted_vouchers(batch, A, pos, t, ta.span)
    else:
        V = np.zeros(pos.shape)
    w = ta.weights
    R = pos / t
    return (w.alpha * A[bidx, pos] + w.beta * R + w.gamma * batch.anchor_flag[bidx, pos]
            + w.delta * P[bidx, pos] - w.lam * batch.freq[bidx, pos] + V)


def _ta_evict(batch, A, P, pos, posf, free, t, w, span, kp) -> np.ndarray:
    B = pos.shape[0]
    bidx = np.arange(B)[:, None]
    if batch.voucher is not None:
        V = batch.voucher[bidx, pos]
    else:
        V = _diluted_vouchers(batch, A, pos, t, span)
    R = pos / t
    u = (w.alpha * A[bidx, pos] + w.beta * R + w.gamma * batch.anchor_flag[bidx, pos]
         + w.delta * P[bidx, pos] - w.lam * batch.freq[bidx, pos] + V)
    tie = batch.tie[bidx, pos]
    sponsored = free & (V > 0)
    protected = np.zeros(pos.shape, dtype=bool)
    if kp > 0:
        counts = sponsored.sum(axis=1)
        protected = sponsored.copy()
        over = np.flatnonzero(counts > kp)
        if over.size:
            vk = np.where(sponsored[over], V[over], -np.inf)
            order = np.lexsort((posf[over], tie[over], vk), axis=-1)
            top = np.zeros((over.size, pos.shape[1]), dtype=bool)
            np.put_along_axis(top, order[:, -kp:], True, axis=1)
            protected[over] = top
    return _lex_argmin([u, tie, posf], free & ~protected)


def run_trial(policy: PolicySpec | str, workload: Workload, K: int, patterns=None) -> TrialResult:
    """One trial; ``policy`` is a spec or a policy name with default settings."""
    spec = make_policy(policy) if isinstance(policy, str) else policy
    return run_batch(spec, [workload], K, patterns)[0]
