import itertools
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from sponsorkv.errors import CheckError, ConfigError
from sponsorkv.theory import (
    CONSISTENT, VIOLATED, BoundReport, check_bounds, decoy_max, decoy_retention, min_budget, min_voucher,
    theorem1_bound, uniform_decoy_claim,
)


def test_heavy_hitter_bound_examples():
    assert theorem1_bound(16, 4000, 1.0) == pytest.approx(0.004)
    assert theorem1_bound(100, 100, 1.0) >= 1.0
    assert theorem1_bound(8, 4000, 0.5) == pytest.approx(theorem1_bound(16, 4000, 0.5) / 2)
    for bad in [(16, 4000, 0.0), (16, 4000, 1.5), (20, 10, 1.0), (0, 10, 1.0)]:
        with pytest.raises(ConfigError):
            theorem1_bound(*bad)


@given(K=st.integers(1, 100), n=st.integers(100, 10_000), c=st.integers(1, 20), e=st.floats(0.01, 1.0))
def test_heavy_hitter_bound_scale_invariant(K, n, c, e):
    assert theorem1_bound(c * K, c * n, e) == pytest.approx(theorem1_bound(K, n, e))


def test_min_voucher_examples():
    assert min_voucher(15, 6) == pytest.approx(15 * 0.8**6, abs=1e-12)
    assert min_voucher(15, 6) == pytest.approx(3.9, abs=0.05)
    assert min_voucher(7.5, 0) == 7.5
    assert min_voucher(10, 3) == pytest.approx(5.12)
    with pytest.raises(ConfigError):
        min_voucher(-1, 2)


def test_min_budget_examples():
    assert min_budget(4, 10) == 15
    assert min_budget(4, 7) == 12
    assert min_budget(0, 0) == 1
    assert min_budget(2, 7, sinks=4) == 13


def test_decoy_max_examples():
    assert decoy_max(64, 4, 6) == 8
    # K=16, W=4: capacity 11 and two spans of 6 need 12
    assert decoy_max(16, 4, 6) == 0
    assert decoy_max(10, 2, 8) == -1
    with pytest.raises(ConfigError):
        decoy_max(5, 4, 6)


@given(K=st.integers(6, 300), W=st.integers(0, 4), L=st.integers(1, 20), dk=st.integers(0, 50),
       dl=st.integers(0, 5))
def test_decoy_max_monotone(K, W, L, dk, dl):
    assert decoy_max(K + dk, W, L) >= decoy_max(K, W, L)
    assert decoy_max(K, W, L + dl) <= decoy_max(K, W, L)


def _survival_by_enumeration(capacity: int, L: int, m: int) -> Fraction:
    """Exact survival of span 0 over every ordering of span tie ranks.

    Each span holds vouchers B*0.8^k for k = 1..L; the ``capacity`` highest
    (voucher, span rank) tokens are protected and nothing else survives.
    """
    spans = m + 1
    kept = 0
    orders = list(itertools.permutations(range(spans)))
    for order in orders:
        rank = {s: r for r, s in enumerate(order)}
        tokens = sorted(((-k, rank[s], s) for s in range(spans) for k in range(1, L + 1)), reverse=True)
        top = tokens[:capacity]
        kept += sum(1 for _, _, s in top if s == 0) == L
    return Fraction(kept, len(orders))


@pytest.mark.parametrize("K,W,L,m", [(30, 4, 5, 4), (64, 4, 6, 5), (17, 1, 3, 5), (12, 1, 2, 5), (14, 1, 3, 4),
                                     (15, 1, 4, 3), (10, 1, 2, 5), (9, 1, 3, 3), (8, 1, 6, 0)])
def test_decoy_retention_matches_enumeration(K, W, L, m):
    exact = _survival_by_enumeration(K - 1 - W, L, m)
    assert decoy_retention(K, W, L, m) == pytest.approx(float(exact))


def test_decoy_retention_regimes():
    assert decoy_retention(64, 4, 6, 8) == 1.0
    assert decoy_retention(64, 4, 6, 9) == pytest.approx(9 / 10)
    assert decoy_retention(64, 4, 6, 12) == 0.0
    assert uniform_decoy_claim(12) == pytest.approx(1 / 13)


def row(policy, K, pct, **kw):
    base = {"policy": policy, "K": str(K), "depth": "0.5", "trials": "50", "pct": f"{pct:.1f}", "n": "4096",
            "needle_len": "6", "span": "6", "window": "2", "sinks": "1", "decoys": "0", "injections": "0",
            "sponsor_budget": "15", "partition": "default", "tie_break": "position"}
    base.update({k: str(v) for k, v in kw.items()})
    return base


def test_sponsored_span_point_consistent_and_violated():
    [ok] = check_bounds([row("ta-fast-regex", 16, 100.0)], ["sponsored-span"])
    assert ok.verdict == CONSISTENT and ok.inputs["min_voucher"] == pytest.approx(3.93216)
    [bad] = check_bounds([row("ta-fast-regex", 16, 90.0)], ["sponsored-span"])
    assert bad.verdict == VIOLATED and bad.measured == pytest.approx(0.9)


def test_heavy_hitter_point():
    [r] = check_bounds([row("h2o", 16, 0.0, n=4000)], ["heavy-hitter"])
    assert r.verdict == CONSISTENT and r.predicted == pytest.approx(0.004)
    [r] = check_bounds([row("h2o", 16, 20.0, n=4000)], ["heavy-hitter"])
    assert r.verdict == VIOLATED


def test_min_budget_sweep():
    rows = [row("ta-fast-regex", K, 100.0 if K >= 15 else 0.0, needle_len=10, span=10, window=4)
            for K in range(3, 21)]
    [r] = check_bounds(rows, ["min-budget"])
    assert r.verdict == CONSISTENT and r.predicted == 15 and r.measured == 15
    shifted = [row("ta-fast-regex", K, 100.0 if K >= 16 else 0.0, needle_len=10, span=10, window=4)
               for K in range(3, 21)]
    assert check_bounds(shifted, ["min-budget"])[0].verdict == VIOLATED


def test_missing_coverage_names_the_cell():
    rows = [row("ta-fast-regex", K, 100.0, needle_len=10, span=10, window=4) for K in (16, 17)]
    with pytest.raises(CheckError, match="K=15"):
        check_bounds(rows, ["min-budget"])
    with pytest.raises(CheckError):
        check_bounds([row("h2o", 16, 0.0)], ["decoy"])
    with pytest.raises(CheckError):
        check_bounds([])
    with pytest.raises(ConfigError):
        check_bounds([row("h2o", 16, 0.0)], ["nonsense"])


def test_decoy_overflow_point():
    r = row("ta-fast-regex", 64, 0.0, decoys=12, window=4, partition="max", tie_break="random", trials=2000)
    [rep] = check_bounds([r], ["decoy"])
    assert rep.predicted == 0.0 and rep.verdict == CONSISTENT


def test_report_rejects_unknown_verdict():
    with pytest.raises(ConfigError):
        BoundReport("x", {}, 1.0, 1.0, "maybe")
