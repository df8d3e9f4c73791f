from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_chunk, make_system
from ocvtrack.config import PhaseSettings
from ocvtrack.dcr import DcrTable
from ocvtrack.errors import MissingDcrTable
from ocvtrack.periods import Period
from ocvtrack.phases import (Direction, OperationalPhase, PhaseSplitter, correct_overvoltage,
                             filter_dynamics, filter_throughput, iter_partials, select_phases,
                             split_by_sign, split_dynamics)


def phase(soc, current=None, t=None, direction=Direction.CHARGE, voltage=None, pid="p"):
    soc = np.asarray(soc, dtype=float)
    n = len(soc)
    t = np.arange(float(n)) if t is None else np.asarray(t, float)
    current = np.full(n, 5.0) if current is None else np.asarray(current, float)
    voltage = np.linspace(50, 52, n) if voltage is None else np.asarray(voltage, float)
    return OperationalPhase(pid, direction, t, voltage, current, np.full(n, 25.0), soc)


def test_throughput_boundary():
    a = phase([10.0, 14.9])
    b = phase([10.0, 15.0])
    audit = []
    kept = filter_throughput([a, b], 5.0, audit)
    assert kept == [b]
    assert audit[0].reason == "throughput" and not audit[0].kept


def test_sign_runs_and_idle():
    cfg = make_system(capacity=10.0)  # idle 0.1 A
    i = np.array([0, 1, 1, 1, 0.05, -2, -2, -2, 0, 0, 3, 3])
    t = np.arange(float(len(i)))
    ph = split_by_sign([make_chunk(t, 50.0, i)], np.linspace(0, 11, len(i)), cfg)
    assert [(p.direction, p.start, p.end) for p in ph] == [
        (Direction.CHARGE, 1, 3), (Direction.DISCHARGE, 5, 7), (Direction.CHARGE, 10, 11)]


def test_gap_closes_phase():
    cfg = make_system(capacity=10.0)
    t = np.array([0, 1, 2, 100, 101, 102.0])
    gap = [False, False, False, True, False, False]
    ph = split_by_sign([make_chunk(t, 50.0, 2.0, gap=gap)], np.zeros(6), cfg)
    assert [(p.start, p.end) for p in ph] == [(0, 2), (100, 102)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 59), max_size=5, unique=True), st.integers(0, 10_000))
def test_splitter_chunking_invariant(cuts, seed):
    cfg = make_system(capacity=10.0)
    rng = np.random.default_rng(seed)
    n = 60
    i = rng.choice([-3.0, 0.0, 2.0], size=n, p=[0.4, 0.2, 0.4])
    i = np.repeat(i[::4], 4)[:n]
    t = np.arange(float(n))
    soc = np.cumsum(i) / 100
    whole = split_by_sign([make_chunk(t, 50.0, i)], soc, cfg)
    bounds = [0] + sorted(cuts) + [n]
    chunks = [make_chunk(t[a:b], 50.0, i[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    parts = split_by_sign(chunks, [soc[a:b] for a, b in zip(bounds[:-1], bounds[1:])], cfg)
    assert [(p.direction, p.start, p.end, p.phase_id) for p in parts] == \
        [(p.direction, p.start, p.end, p.phase_id) for p in whole]
    for a, b in zip(parts, whole):
        np.testing.assert_array_equal(a.soc, b.soc)


def test_split_dynamics_at_violations():
    cfg = make_system(capacity=10.0)  # limit 1 A/s
    cur = np.array([5, 5, 5, 7, 7, 7, 7, 6.5, 6.5, 6.5])
    p = phase(np.linspace(0, 20, 10), current=cur)
    parts = split_dynamics(p, 0.1 * cfg.one_c_current)
    assert [(q.start, q.end) for q in parts] == [(0, 2), (3, 9)]
    assert parts[0].phase_id == "p.0" and parts[1].phase_id == "p.1"
    # exactly at the limit is allowed
    cur2 = np.array([5, 5, 6, 6, 6.0])
    assert len(split_dynamics(phase(np.linspace(0, 10, 5), current=cur2), 1.0)) == 1


def test_fragments_refiltered_and_audited():
    cfg = make_system(capacity=10.0)
    cur = np.array([5, 5, 9, 9, 9, 9, 9, 9, 9, 9.0])
    p = phase(np.linspace(0, 20, 10), current=cur)
    audit = []
    kept = filter_dynamics([p], cfg, 0.10, 5.0, audit)
    assert [(q.start, q.end) for q in kept] == [(2, 9)]
    reasons = [a.reason for a in audit]
    assert reasons == ["split_dynamics:2", "throughput"]


def test_select_phases_audit_complete():
    cfg = make_system(capacity=10.0)
    ps = [phase([0, 1.0], pid="a"), phase(np.linspace(0, 20, 10), pid="b")]
    audit = []
    kept = select_phases(ps, cfg, PhaseSettings(), audit)
    assert [p.phase_id for p in kept] == ["b"]
    assert {(a.phase_id, a.kept) for a in audit} == {("a", False), ("b", True)}


# ---------------------------------------------------------------- correction

PER = Period(0.0, 1000.0, "x")


def flat_table(r=0.02):
    med = np.full((10, 8), r)
    return DcrTable(np.arange(0, 101, 10.0), np.arange(0, 41, 5.0), med, np.full((10, 8), 5), PER)


def test_overvoltage_correction_exact():
    cfg = make_system(capacity=10.0)
    soc = np.linspace(20.0, 30.0, 41)
    ocv = 50 + 0.1 * soc
    cur = np.full(41, 4.0)
    p = phase(soc, current=cur, voltage=ocv + cur * 0.02)
    pc = correct_overvoltage(p, flat_table(), cfg)
    np.testing.assert_allclose(pc.soc, np.arange(20.0, 30.01, 0.25))
    np.testing.assert_allclose(pc.voltage, 50 + 0.1 * pc.soc, atol=1e-12)
    assert pc.mean_c_rate == pytest.approx(0.4)
    assert not pc.extrapolated.any()


def test_discharge_partial_ordered_along_phase():
    cfg = make_system(capacity=10.0)
    soc = np.linspace(60.0, 50.0, 21)
    cur = np.full(21, -3.0)
    p = phase(soc, current=cur, voltage=50 + 0.1 * soc + cur * 0.02, direction=Direction.DISCHARGE)
    pc = correct_overvoltage(p, flat_table(), cfg)
    assert pc.soc[0] == 60.0 and pc.soc[-1] == 50.0
    s, v = pc.ascending()
    assert s[0] == 50.0
    np.testing.assert_allclose(v, 50 + 0.1 * s, atol=1e-12)


def test_missing_table():
    cfg = make_system(capacity=10.0)
    p = phase(np.linspace(0, 10, 5), t=np.arange(2000.0, 2005.0))
    with pytest.raises(MissingDcrTable):
        correct_overvoltage(p, None, cfg)
    with pytest.raises(MissingDcrTable):
        correct_overvoltage(p, flat_table(), cfg)
    skipped = []
    assert list(iter_partials([p], [flat_table()], cfg, skipped=skipped)) == []
    assert skipped == ["p"]


def test_splitter_shift_soc_only_before():
    cfg = make_system(capacity=10.0)
    sp = PhaseSplitter(cfg)
    sp.update(make_chunk(np.arange(5.0), 50.0, 2.0), np.zeros(5))
    assert sp.pending_start == 0.0
    sp.shift_soc(1.0, before=3.0)
    out = sp.finish()
    np.testing.assert_array_equal(out[0].soc, [1, 1, 1, 0, 0])
