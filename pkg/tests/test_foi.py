from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocvtrack.config import Chemistry
from ocvtrack.diff import DiffCurve, DiffKind
from ocvtrack.errors import ConfigError, InsufficientObservations, NoExtremumFound, WindowOutOfDomain
from ocvtrack.foi import (DmHypothesis, FoiFeature, FoiSpec, FoiTrack, PeriodCurve, Reference,
                          attribute_dm, builtin_catalog, find_extremum, load_catalog, locate, track,
                          track_all)


def gauss_ic(peaks, x=None, sigma=0.0, open_ends=(False, False)):
    x = np.arange(3.40, 4.15, 0.001) if x is None else x
    y = np.full(len(x), 10.0)
    for mu, sg, h in peaks:
        y = y + h * np.exp(-0.5 * ((x - mu) / sg) ** 2)
    return DiffCurve(DiffKind.IC, x, y, sigma, open_ends=open_ends)


def spec(window=(3.45, 3.58), features=(FoiFeature.PEAK_INTENSITY, FoiFeature.PEAK_POSITION), **kw):
    return FoiSpec(1, Chemistry.LMO_NMC_BLEND, DiffKind.IC, features, window, **kw)


@pytest.mark.parametrize("chem", list(Chemistry))
def test_builtin_catalog_per_chemistry(chem):
    specs = builtin_catalog(chem)
    assert specs, chem
    assert [s.foi_id for s in specs] == sorted({s.foi_id for s in specs})
    assert all(s.chemistry is chem for s in specs)


def test_catalog_from_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"foi": [{"id": 9, "chemistry": "Lfp", "curve": "DV",
                                      "features": ["PeakDistance"], "window": [10, 20],
                                      "pair_window": [60, 80],
                                      "hypotheses": [{"quantity": "Dist", "sign": -1, "dm": ["LLI"]}]}]}))
    (s,) = load_catalog(p)
    assert s.foi_id == 9 and s.quantities == ("Dist",) and s.curve_kind is DiffKind.DV


@pytest.mark.parametrize("kw", [
    dict(window=(3.6, 3.5)),
    dict(features=(FoiFeature.PEAK_DISTANCE,)),
    dict(features=(FoiFeature.PEAK_INTENSITY, FoiFeature.VALLEY_POSITION)),
    dict(dm_hypothesis=(DmHypothesis("Dist", 1, ("LLI",)),)),
    dict(dm_hypothesis=(DmHypothesis("Int", 2, ("LLI",)),)),
    dict(dm_hypothesis=(DmHypothesis("Int", 1, ("SEI",)),)),
])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        spec(**kw)


def test_parabolic_refinement_exact_on_quadratic_peak():
    x = np.arange(0.0, 1.0, 0.01)
    y = 5.0 - 40.0 * (x - 0.4237) ** 2
    e = find_extremum(x, y, (0.2, 0.6))
    assert e.x == pytest.approx(0.4237, abs=1e-12)
    assert e.y == pytest.approx(5.0, abs=1e-12)
    assert e.refined


def test_valley_window_and_errors():
    x = np.linspace(0, 10, 1001)
    y = np.cos(x)
    e = find_extremum(x, y, (2.0, 4.5), valley=True)
    assert e.x == pytest.approx(np.pi, abs=1e-6)
    with pytest.raises(NoExtremumFound):
        find_extremum(x, y, (0.5, 2.0))
    with pytest.raises(WindowOutOfDomain):
        find_extremum(x, y, (11.0, 12.0))


def test_edge_allowed_and_open_end_margin():
    x = np.linspace(0, 1, 101)
    y = x ** 2
    with pytest.raises(NoExtremumFound):
        find_extremum(x, y, (0.8, 1.0))
    assert find_extremum(x, y, (0.8, 1.0), edge_allowed=True).x == 1.0
    # a bump right at an open end is ignored, the same bump at a closed end is kept
    y2 = np.exp(-0.5 * ((x - 0.97) / 0.02) ** 2)
    assert find_extremum(x, y2, (0.8, 1.0)).x == pytest.approx(0.97, abs=1e-3)
    with pytest.raises(NoExtremumFound):
        find_extremum(x, y2, (0.8, 1.0), edge_margin=(0.0, 0.05))


def test_locate_and_normalize():
    c = gauss_ic([(3.50, 0.02, 200.0), (3.66, 0.02, 300.0)])
    obs = locate(spec(), c, "2020", 0.0)
    assert [o.quantity for o in obs] == ["Int", "Pos"]
    assert obs[0].raw == pytest.approx(210.0, rel=1e-6)
    assert obs[1].raw == pytest.approx(3.50, abs=1e-6)
    ref = Reference.of(c)
    assert ref.highest_peak == pytest.approx(310.0, rel=1e-6)
    assert ref.normalize("Int", 155.0) == pytest.approx(50.0, rel=1e-6)
    assert ref.normalize("Pos", c.x[0]) == 0.0
    with pytest.raises(ValueError):
        locate(spec(), DiffCurve(DiffKind.DV, c.x, c.y, 0.0))


def test_peak_distance():
    x = np.arange(0.0, 100.0, 0.25)
    y = np.exp(-0.5 * ((x - 20) / 3) ** 2) + np.exp(-0.5 * ((x - 65) / 3) ** 2)
    s = FoiSpec(5, Chemistry.LMO_NMC_BLEND, DiffKind.DV, (FoiFeature.PEAK_DISTANCE,), (55, 80), (5, 25))
    (o,) = locate(s, DiffCurve(DiffKind.DV, x, y, 0.0))
    assert o.quantity == "Dist" and o.raw == pytest.approx(45.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.01, 0.01), st.floats(-30.0, 30.0))
def test_track_recovers_linear_drift(dpos, dint):
    years = [0.0, 1.0, 2.0, 3.0, 4.0]
    curves = []
    for t in years:
        c = gauss_ic([(3.50 + dpos * t, 0.02, 200.0 + dint * t), (3.66, 0.02, 400.0)])
        curves.append(PeriodCurve(f"{2020 + int(t)}", t, c))
    tracks = {tr.quantity: tr for tr in track(spec(), curves)}
    span = curves[0].curve.x[-1] - curves[0].curve.x[0]
    ref_peak = 410.0
    want_pos = dpos / span * 100.0
    want_int = dint / ref_peak * 100.0
    assert tracks["Pos"].drift == pytest.approx(want_pos, rel=0.05, abs=1e-3)
    assert tracks["Int"].drift == pytest.approx(want_int, rel=0.05, abs=1e-3)


def test_track_missing_and_insufficient():
    good = gauss_ic([(3.50, 0.02, 200.0)])
    flat = gauss_ic([])
    curves = [PeriodCurve("a", 0, good), PeriodCurve("b", 1, flat), PeriodCurve("c", 2, good)]
    tr = track(spec(), curves)
    assert tr[0].missing == ("b",)
    assert [o.period for o in tr[0].observations] == ["a", "c"]
    with pytest.raises(InsufficientObservations):
        track(spec(), curves[:2])
    tracks, failed = track_all([spec()], curves[:2], [])
    assert tracks == [] and "FOI1" in failed


def fake_track(foi_id, quantity, drift, hyps):
    s = FoiSpec(foi_id, Chemistry.LMO_NMC_BLEND, DiffKind.IC,
                (FoiFeature.PEAK_INTENSITY, FoiFeature.PEAK_POSITION), (3.4, 3.5), dm_hypothesis=hyps)
    return FoiTrack(s, quantity, (), drift, 1.0)


def test_dm_voting():
    lli = (DmHypothesis("Pos", 1, ("LLI",)), DmHypothesis("Int", -1, ("LLI",)))
    lam = (DmHypothesis("Int", -1, ("LAM_NE", "LAM_PE")),)
    tracks = [fake_track(1, "Pos", 1.0, lli), fake_track(1, "Int", -5.0, lli),
              fake_track(2, "Int", 0.3, lam)]  # below the floor: no vote
    rep = attribute_dm(tracks, drift_floor=0.5)
    assert rep["LLI"].verdict == "dominant"
    assert rep["LAM_NE"].verdict == "not indicated" and rep["LAM_PE"].supporting == ()
    tracks.append(fake_track(2, "Int", -2.0, lam))
    rep = attribute_dm(tracks)
    assert rep["LAM_NE"].verdict == "possible"
    contra = attribute_dm([fake_track(1, "Pos", -1.0, lli), fake_track(1, "Int", -1.0, lli)])
    assert contra["LLI"].verdict == "not indicated"
    assert contra["LLI"].contradicting == ("1:Pos",)
    d = rep.to_dict()
    assert d["LLI"]["supporting"] == [1] and d["LLI"]["verdict"] == "dominant"
