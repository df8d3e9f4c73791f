from __future__ import annotations

import numpy as np
import pytest

from ocvtrack.config import Chemistry, SystemConfig
from ocvtrack.ingest import TelemetryChunk


def make_system(capacity: float = 40.0, cells: int = 14, **kw) -> SystemConfig:
    args = dict(system_id="t", chemistry=Chemistry.LMO_NMC_BLEND, nominal_capacity=capacity,
                nominal_voltage=3.75 * cells, cell_count_series=cells, eoc_voltage=4.14 * cells,
                eoc_taper_current=0.01 * capacity, eod_voltage=3.35 * cells)
    args.update(kw)
    return SystemConfig(**args)


def make_chunk(t, v, i, temp=None, gap=None) -> TelemetryChunk:
    t = np.asarray(t, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), t.shape).copy()
    i = np.broadcast_to(np.asarray(i, dtype=np.float64), t.shape).copy()
    temp = np.full_like(t, 25.0) if temp is None else np.broadcast_to(np.asarray(temp, float), t.shape).copy()
    gap = np.zeros(len(t), bool) if gap is None else np.asarray(gap, bool)
    return TelemetryChunk(t, v, i, v * i, temp, gap)


@pytest.fixture
def system() -> SystemConfig:
    return make_system()


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[str, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    cid = dict(report.user_properties).get("criterion")
    if cid is not None:
        _CRITERIA.setdefault(cid, []).append((report.nodeid.split("::")[-1], report.outcome))


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        runs = _CRITERIA[cid]
        bad = [n for n, o in runs if o != "passed"]
        verdict = "FAIL" if bad else "PASS"
        detail = f"{len(runs) - len(bad)}/{len(runs)} tests passed"
        tr.write_line(f"{cid}: {verdict}  {detail}" + (f"; failed: {', '.join(bad)}" if bad else ""))
