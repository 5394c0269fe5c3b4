import pytest
from hypothesis import given, strategies as st

from sponsorkv.errors import ConfigError
from sponsorkv.sponsorship import (
    SponsorLedger, allocate_vouchers, allocate_vouchers_ranked, decay_budgets, voucher_array,
)


def ledger(*entries):
    led = SponsorLedger()
    for pos, b, L in entries:
        led.sponsor(pos, b, L)
    return led


def test_single_anchor_values():
    v = allocate_vouchers(ledger((10, 15, 6)), 40)
    assert v[11] == pytest.approx(12.0)
    assert v[16] == pytest.approx(15 * 0.8**6)
    assert v[16] == pytest.approx(3.93216)
    assert 17 not in v and 10 not in v


def test_empty_ledger():
    assert allocate_vouchers(SponsorLedger(), 10) == {}
    assert voucher_array(SponsorLedger(), 10).sum() == 0.0


def test_overlapping_anchors_add():
    v = allocate_vouchers(ledger((10, 10, 6), (11, 10, 6)), 40)
    assert v[12] == pytest.approx(10 * 0.8**2 + 10 * 0.8)
    assert v[12] == pytest.approx(14.4)


def test_n_below_last_sponsored_position():
    with pytest.raises(ConfigError):
        allocate_vouchers(ledger((10, 15, 6)), 12)


def test_redetection_resets_instead_of_stacking():
    led = ledger((5, 15, 6))
    led = decay_budgets(led)
    led.sponsor(5, 15, 6)
    assert len(led) == 1 and led.entries[5].budget == 15


def test_ranked_below_floor_is_empty():
    assert allocate_vouchers_ranked({3: 0.2, 9: 0.2}) == {}
    assert allocate_vouchers_ranked({3: 0.3}) == {}


def test_ranked_confidence_one_reduces_to_plain():
    ranked = allocate_vouchers_ranked({10: 1.0}, 15, 6)
    plain = allocate_vouchers(ledger((10, 15, 6)), 40)
    assert ranked.keys() == plain.keys()
    for k in plain:
        assert ranked[k] == pytest.approx(plain[k])


def test_ranked_contributions_scale_with_confidence():
    a = allocate_vouchers_ranked({10: 0.9}, 15, 6)
    b = allocate_vouchers_ranked({10: 0.4}, 15, 6)
    both = allocate_vouchers_ranked({10: 0.9, 12: 0.4}, 15, 6)
    assert a[13] / b[13] == pytest.approx(0.9 / 0.4)
    # offset 1 of the second anchor and offset 3 of the first overlap at 13
    assert both[13] == pytest.approx(0.9 * 15 * 0.8**3 + 0.4 * 15 * 0.8)


def test_ranked_rejects_out_of_range_confidence():
    with pytest.raises(ConfigError):
        allocate_vouchers_ranked({1: 1.5})


def test_decay_examples():
    assert decay_budgets(ledger((1, 15, 6))).entries[1].budget == pytest.approx(13.5)
    led = ledger((1, 15, 6))
    for _ in range(10):
        led = decay_budgets(led)
    assert led.entries[1].budget == pytest.approx(15 * 0.9**10)
    assert led.entries[1].budget == pytest.approx(5.2302, abs=1e-4)
    assert len(decay_budgets(SponsorLedger())) == 0


def test_decay_prunes_exhausted_entries():
    led = ledger((1, 1e-6, 6), (2, 1.0, 6))
    out = decay_budgets(led)
    assert list(out.entries) == [2]


def test_records_round_trip():
    led = ledger((3, 15, 6), (9, 7.5, 4))
    assert SponsorLedger.from_records(led.to_records()).to_records() == led.to_records()


def test_invalid_entries():
    with pytest.raises(ConfigError):
        ledger((1, -1.0, 6))
    with pytest.raises(ConfigError):
        ledger((1, 1.0, 0))


anchors = st.lists(st.tuples(st.integers(1, 50), st.floats(0, 30), st.integers(1, 10)), max_size=6,
                   unique_by=lambda e: e[0])


@given(entries=anchors)
def test_nonnegative_and_zero_outside_spans(entries):
    v = voucher_array(ledger(*entries), 80)
    assert (v >= 0).all()
    inside = {p for a, _, L in entries for p in range(a + 1, a + L + 1)}
    for p in range(81):
        if p not in inside:
            assert v[p] == 0.0


@given(a=st.integers(1, 30), B=st.floats(0.01, 50), L=st.integers(2, 12))
def test_strictly_decreasing_within_span_and_min_at_tail(a, B, L):
    v = allocate_vouchers(ledger((a, B, L)), a + L)
    vals = [v[a + k] for k in range(1, L + 1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    assert min(vals) == pytest.approx(B * 0.8**L)


@given(e1=st.tuples(st.integers(1, 30), st.floats(0, 30), st.integers(1, 10)),
       e2=st.tuples(st.integers(31, 60), st.floats(0, 30), st.integers(1, 10)))
def test_additive_over_anchors(e1, e2):
    both = voucher_array(ledger(e1, e2), 80)
    assert both == pytest.approx(voucher_array(ledger(e1), 80) + voucher_array(ledger(e2), 80))


@given(B=st.floats(1, 50), t=st.integers(0, 20))
def test_decay_scales_every_voucher(B, t):
    led = ledger((5, B, 6), (8, B / 2, 6))
    before = voucher_array(led, 30)
    for _ in range(t):
        led = decay_budgets(led)
    assert voucher_array(led, 30) == pytest.approx(before * 0.9**t)
