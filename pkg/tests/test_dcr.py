from __future__ import annotations

from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_chunk, make_system
from ocvtrack.config import DcrSettings
from ocvtrack.dcr import (DcrPulse, DcrTable, PulseDetector, build_table, detect_pulses, estimate_dcr,
                          fit_trend)
from ocvtrack.errors import EmptyTable, InsufficientYears, NegativeResistance, ZeroCurrentDelta
from ocvtrack.periods import Period, period_of


def pulse(r=0.01, soc=50.0, temp=22.0, t=0.0, i1=-1.0, di=-10.0):
    v1 = 52.0
    return DcrPulse(t, t + 3, v1, v1 + r * di, i1, i1 + di, soc, temp)


def test_dcr_closed_form():
    p = DcrPulse(0, 3, 52.125, 51.9375, -1.25, -21.25, 50, 25)
    assert estimate_dcr(p) == pytest.approx((51.9375 - 52.125) / (-21.25 + 1.25), abs=1e-12)
    assert abs(estimate_dcr(p) - 0.009375) <= 1e-12


def test_dcr_errors():
    with pytest.raises(ZeroCurrentDelta):
        estimate_dcr(DcrPulse(0, 3, 52, 51, 5, 5, 50, 25))
    with pytest.raises(NegativeResistance):
        estimate_dcr(DcrPulse(0, 3, 52, 53, 0, -10, 50, 25))


def step_signal(n=40, k=10, hold=4, i0=-1.0, di=-10.0, r=0.02, v0=52.0):
    t = np.arange(float(n))
    i = np.full(n, i0)
    i[k + 1:k + 1 + hold] = i0 + di
    v = v0 + r * i
    return t, v, i


def test_detects_single_pulse_and_return():
    cfg = make_system(capacity=10.0)  # min step 5 A
    t, v, i = step_signal()
    soc = np.linspace(60, 59, len(t))
    ps = detect_pulses([make_chunk(t, v, i)], soc, cfg)
    assert len(ps) == 2
    p = ps[0]
    assert p.t_start == 10 and p.t_end == 14
    assert p.i1 == -1.0 and p.i2 == -11.0
    assert estimate_dcr(p) == pytest.approx(0.02)
    assert p.soc_at_pulse == soc[10]
    assert ps[1].t_start == 14  # the step back is a pulse too


def test_short_hold_and_small_step_ignored():
    cfg = make_system(capacity=10.0)
    t, v, i = step_signal(hold=2)  # hold of 1 s after the step sample
    ps = detect_pulses([make_chunk(t, v, i)], np.full(len(t), 50.0), cfg)
    assert [p.t_start for p in ps] == [12.0]  # only the step back, which holds
    t, v, i = step_signal(di=-4.0)
    assert detect_pulses([make_chunk(t, v, i)], np.full(len(t), 50.0), cfg) == []


def test_sign_reversal_beyond_idle_rejected():
    cfg = make_system(capacity=10.0)
    t, v, i = step_signal(i0=3.0, di=-10.0)  # +3 A -> -7 A
    ps = detect_pulses([make_chunk(t, v, i)], np.full(len(t), 50.0), cfg)
    assert ps == []


def test_pulse_not_detected_across_gap():
    cfg = make_system(capacity=10.0)
    t, v, i = step_signal()
    gap = np.zeros(len(t), bool)
    gap[11] = True
    ps = detect_pulses([make_chunk(t, v, i, gap=gap)], np.full(len(t), 50.0), cfg)
    assert all(p.t_start != 10 for p in ps)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 79), min_size=0, max_size=6, unique=True))
def test_detector_chunking_invariant(cuts):
    cfg = make_system(capacity=10.0)
    rng = np.random.default_rng(1)
    n = 80
    t = np.arange(float(n))
    i = np.full(n, -1.0)
    for k in (5, 30, 55):
        i[k + 1:k + 5] = -12.0
    i += rng.normal(0, 0.05, n)
    v = 52 + 0.02 * i
    soc = np.linspace(50, 49, n)
    whole = detect_pulses([make_chunk(t, v, i)], soc, cfg)
    bounds = [0] + sorted(cuts) + [n]
    chunks = [make_chunk(t[a:b], v[a:b], i[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    parts = detect_pulses(chunks, soc, cfg)
    assert parts == whole
    assert len(whole) == 6


def test_detector_shift_soc_only_before():
    cfg = make_system(capacity=10.0)
    det = PulseDetector(cfg)
    t, v, i = step_signal(n=12, k=8)
    det.update(make_chunk(t, v, i), np.full(12, 50.0))
    det.shift_soc(5.0, before=9.0)
    t2 = np.arange(12.0, 30.0)
    det.update(make_chunk(t2, 52 - 0.02, -1.0), np.full(len(t2), 50.0))
    det.finish()
    assert det.pulses[0].soc_at_pulse == 55.0


# ---------------------------------------------------------------- tables

PER = Period(0.0, 100.0, "x")


def test_table_median_and_min_samples():
    s = DcrSettings(min_samples=3)
    ps = [pulse(r, soc=45, temp=22) for r in (0.010, 0.011, 0.030)] + [pulse(0.02, soc=5, temp=22)] * 2
    tb = build_table(ps, PER, s)
    a, b = 4, 4  # soc 40-50, temp 20-25
    assert tb.median[a, b] == pytest.approx(0.011)
    assert tb.count[a, b] == 3
    assert np.isnan(tb.median[0, b]) and tb.count[0, b] == 2
    assert tb.tally.accepted == 5


def test_table_upper_edges_closed():
    s = DcrSettings(min_samples=1)
    tb = build_table([pulse(0.01, soc=100.0, temp=40.0)], PER, s)
    assert tb.count[-1, -1] == 1


def test_table_rejects_invalid_pulses_and_empty():
    bad = DcrPulse(0, 3, 52, 53, 0, -10, 50, 22)
    with pytest.raises(EmptyTable):
        build_table([bad], PER)
    tb = build_table([bad] + [pulse()] * 5, PER)
    assert tb.tally.negative == 1 and tb.tally.accepted == 5


def test_lookup_bilinear_and_nearest_fill():
    soc_e = np.array([0.0, 10.0, 20.0])
    t_e = np.array([0.0, 10.0, 20.0])
    med = np.array([[1.0, 2.0], [3.0, np.nan]])
    tb = DcrTable(soc_e, t_e, med, np.ones((2, 2), int), PER)
    grid, fill = tb.filled()
    # (1,1) is equidistant from (0,1) and (1,0): lower SOC index wins
    assert grid[1, 1] == 2.0 and fill[1, 1]
    r, ext = tb.lookup([5.0, 15.0, 10.0, 5.0], [5.0, 5.0, 5.0, 15.0])
    np.testing.assert_allclose(r, [1.0, 3.0, 2.0, 2.0])
    assert ext.tolist() == [False, False, False, False]
    r, ext = tb.lookup(15.0, 15.0)
    assert r == pytest.approx(2.0) and ext
    r, ext = tb.lookup(10.0, 10.0)  # centre of all four cells
    assert r == pytest.approx((1 + 2 + 3 + 2) / 4) and ext


def test_table_dict_round_trip():
    tb = build_table([pulse(0.01 + k * 1e-4) for k in range(6)], PER)
    back = DcrTable.from_dict(tb.to_dict())
    np.testing.assert_array_equal(np.isnan(back.median), np.isnan(tb.median))
    np.testing.assert_array_equal(back.median[tb.valid], tb.median[tb.valid])
    np.testing.assert_array_equal(back.count, tb.count)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 100), st.floats(0, 40), st.floats(0, 100), st.floats(0, 40))
def test_lookup_stays_within_table_range(s1, t1, s2, t2):
    rng = np.random.default_rng(0)
    med = rng.uniform(0.004, 0.01, (10, 8))
    med[rng.random((10, 8)) < 0.4] = np.nan
    med[0, 0] = 0.005
    tb = DcrTable(np.arange(0, 101, 10.0), np.arange(0, 41, 5.0), med, np.ones((10, 8), int), PER)
    r, _ = tb.lookup([s1, s2], [t1, t2])
    lo, hi = np.nanmin(med), np.nanmax(med)
    assert np.all(r >= lo - 1e-15) and np.all(r <= hi + 1e-15)


# ---------------------------------------------------------------- trends


def yearly(values_by_year, soc=50.0):
    out = []
    for y, r in values_by_year:
        per = period_of(datetime(y, 6, 1, tzinfo=timezone.utc).timestamp(), "year")
        out.append(build_table([pulse(r, soc=soc, temp=22)] * 5, per))
    return out


def test_trend_linear_growth_exact():
    tabs = yearly([(2020, 0.010), (2021, 0.011), (2022, 0.012), (2023, 0.013)])
    tr = fit_trend(tabs, (40, 60), (20, 25))
    np.testing.assert_allclose(tr.relative_pct, [100, 110, 120, 130])
    assert tr.gradient_pp_per_year == pytest.approx(10.0, abs=1e-9)
    assert tr.labels == ("2020", "2021", "2022", "2023")
    assert tr.to_rows()[-1] == ("gradient_pp_per_year", "10.000000")


def test_trend_needs_two_years():
    with pytest.raises(InsufficientYears):
        fit_trend(yearly([(2020, 0.01)]))
    with pytest.raises(InsufficientYears):
        fit_trend(yearly([(2020, 0.01), (2021, 0.01)], soc=5.0), (40, 60))
