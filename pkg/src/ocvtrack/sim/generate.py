"""1 Hz household telemetry generator with a ground-truth event log.

A day is built in two steps.  Vectorised numpy code draws the household
request (PV surplus minus load), the temperature trace, programmed pulses,
spikes and measurement noise.  A numba kernel then walks the samples and
applies the battery physics and the BMS: CC-CV charging up to full, cut-off
at empty, a discharge voltage floor and the DCR pulses.

Every day draws from its own generator seeded with ``(seed, day)``, so a
simulation can be regenerated chunk by chunk and always yields the same
bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

import numba
import numpy as np
from scipy.signal import find_peaks, lfilter

from ..config import IngestSettings, SystemConfig
from ..errors import ConfigOutOfRange
from ..ingest import IngestStats, TelemetryStream, _validate
from .battery import SimBattery, age

DAY_S = 86400
EVENT_LOG_VERSION = 1
CSV_HEADER = "timestamp,voltage_v,current_a,power_w,temperature_c\n"
_EPOCH_2020 = 1577836800.0


@dataclass(frozen=True)
class LoadScenario:
    """Household, PV, charger and sensor description.

    Currents are given as C-rates of the nominal capacity.  ``segments``
    override the household request with fixed currents (amperes, positive
    charges) over ``[t0, t1)`` seconds from the start.  ``pulse_schedule``
    adds programmed steps ``(t_s, delta_c, hold_s)`` on top of the random
    ones.  ``initial_soc`` is in percent of nominal from the empty end.
    """

    days: int = 1
    start: float = _EPOCH_2020
    initial_soc: float = 50.0
    household: bool = True
    load_c: float = 0.05
    load_evening_c: float = 0.12
    load_sigma: float = 0.3
    load_tau_s: float = 900.0
    pv_peak_c: float = 0.6
    pv_winter_fraction: float = 0.3
    cloud_min: float = 0.6
    temp_mean_c: float = 20.0
    temp_season_c: float = 8.0
    temp_daily_c: float = 2.0
    noise_v: float = 0.005
    noise_i: float = 0.05
    noise_t: float = 0.1
    quantize: bool = True
    pulses_per_day: float = 5.0
    pulse_c: float = 0.55
    pulse_hold_s: tuple[int, int] = (2, 4)
    pulse_min_soc: float = 12.0
    pulse_schedule: tuple[tuple[float, float, int], ...] = ()
    spikes_per_day: float = 2.0
    spike_c: float = 0.3
    segments: tuple[tuple[float, float, float], ...] = ()
    max_charge_c: float = 0.5
    max_discharge_c: float = 1.0
    cv_offset_v_cell: float = 0.0015
    taper_cutoff_c: float = 0.01
    recharge_hysteresis_pp: float = 3.0
    eod_margin_v_cell: float = 0.05

    def __post_init__(self) -> None:
        if self.days < 1:
            raise ConfigOutOfRange("days must be >= 1")
        nonneg = ("load_c", "load_evening_c", "load_sigma", "pv_peak_c", "noise_v", "noise_i",
                  "noise_t", "pulses_per_day", "spikes_per_day", "pulse_c", "spike_c",
                  "recharge_hysteresis_pp", "eod_margin_v_cell", "cv_offset_v_cell")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigOutOfRange(f"{name} must be >= 0")
        if not 0 <= self.pv_winter_fraction <= 1 or not 0 <= self.cloud_min <= 1:
            raise ConfigOutOfRange("pv_winter_fraction and cloud_min must lie in [0, 1]")
        if self.load_tau_s <= 0 or self.max_charge_c <= 0 or self.max_discharge_c <= 0:
            raise ConfigOutOfRange("load_tau_s and current limits must be positive")
        if self.taper_cutoff_c <= 0:
            raise ConfigOutOfRange("taper_cutoff_c must be positive")
        lo, hi = self.pulse_hold_s
        if not 2 <= lo <= hi <= 8:
            raise ConfigOutOfRange("pulse_hold_s must satisfy 2 <= lo <= hi <= 8")
        if not 0 <= self.initial_soc <= 100:
            raise ConfigOutOfRange("initial_soc must lie in [0, 100]")
        for t0, t1, _ in self.segments:
            if not t1 > t0:
                raise ConfigOutOfRange("segment end must follow its start")
        for _, _, hold in self.pulse_schedule:
            if not 2 <= int(hold) <= 8:
                raise ConfigOutOfRange("programmed pulse hold must lie in [2, 8] s")

    @classmethod
    def quiet(cls, **kw) -> "LoadScenario":
        """No household, PV, pulses, spikes or noise; add ``segments`` to drive it."""
        base = dict(household=False, pulses_per_day=0.0, spikes_per_day=0.0,
                    noise_v=0.0, noise_i=0.0, noise_t=0.0, quantize=False,
                    temp_season_c=0.0, temp_daily_c=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "LoadScenario":
        d = dict(d)
        for key in ("pulse_schedule", "segments"):
            if key in d:
                d[key] = tuple(tuple(x) for x in d[key])
        if "pulse_hold_s" in d:
            d["pulse_hold_s"] = tuple(d["pulse_hold_s"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigOutOfRange(str(exc)) from None


def system_config(battery: SimBattery, system_id: str = "sim") -> SystemConfig:
    """Pipeline metadata matching a simulated battery."""
    n = battery.cells_series
    pre = battery.preset
    return SystemConfig(
        system_id=system_id,
        chemistry=pre.chemistry,
        nominal_capacity=battery.capacity_ah,
        nominal_voltage=round(n * 0.5 * (pre.v_eod + pre.v_eoc), 3),
        cell_count_series=n,
        eoc_voltage=round(n * (pre.v_eoc - 0.007), 3),
        eoc_taper_current=0.01 * battery.capacity_ah,
        eod_voltage=((0.0, round(n * pre.v_eod, 3)),),
    )


# --------------------------------------------------------------------------
# kernel

# state slots
_S, _FULL, _EMPTY, _PLEFT, _PBASE, _PDELTA, _CV = range(7)


@numba.njit(cache=True)
def _kernel(state, grid, vtab, n_cells, rpar, usable, cap_ah, req, temp,
            p_start, p_len, p_delta, spike, lim):
    max_chg, max_dis, v_cv, cutoff, hyst, pmin_soc, v_min, idle = (
        lim[0], lim[1], lim[2], lim[3], lim[4], lim[5], lim[6], lim[7])
    r0, ks, taus, kt, taut, growth = rpar[0], rpar[1], rpar[2], rpar[3], rpar[4], rpar[5]
    n = req.shape[0]
    cur = np.empty(n)
    volt = np.empty(n)
    soc = np.empty(n)
    res = np.empty(n)
    p_exec = np.zeros(n, np.int8)
    s_exec = np.zeros(n, np.int8)
    f_event = np.zeros(n, np.int8)
    k_s = 100.0 / 3600.0 / cap_ah
    top = 100.0 - usable
    s = state[_S]
    full = state[_FULL] > 0
    empty = state[_EMPTY] > 0
    pleft = int(state[_PLEFT])
    pbase = state[_PBASE]
    pdelta = state[_PDELTA]
    cv = state[_CV] > 0
    for k in range(n):
        st = s + top
        ocv = n_cells * np.interp(s, grid, vtab)
        r = n_cells * growth * r0 * (1.0 + ks * math.exp(-st / taus)) * (1.0 + kt * math.exp(-temp[k] / taut))
        if full and s < usable - hyst:
            full = False
        if empty and s > hyst:
            empty = False
        rq = req[k]
        if pleft > 0:
            icmd = pbase + pdelta
            pleft -= 1
        else:
            icmd = rq
            if p_start[k] > 0:
                base = rq
                if full and base > 0:
                    base = 0.0
                if base <= 0.0 and not empty and st > pmin_soc and s > 1.0:
                    pbase = base
                    pdelta = p_delta[k]
                    pleft = p_len[k] - 1
                    icmd = pbase + pdelta
                    p_exec[k] = 1
            elif spike[k] != 0 and abs(rq) > idle:
                icmd = rq + (spike[k] if rq > 0 else -spike[k])
                s_exec[k] = 1
        i = icmd
        if i > 0:
            if full:
                i = 0.0
            else:
                if i > max_chg:
                    i = max_chg
                if ocv + i * r > v_cv:
                    i = (v_cv - ocv) / r
                    if i < 0.0:
                        i = 0.0
                    cv = True
                if s >= usable or (cv and i < cutoff):
                    full = True
                    f_event[k] = 1
                    i = 0.0
                elif s + i * k_s > usable:
                    i = (usable - s) / k_s
        else:
            cv = False
            if i < 0:
                if empty:
                    i = 0.0
                else:
                    if i < -max_dis:
                        i = -max_dis
                    if ocv + i * r < v_min:
                        i = (v_min - ocv) / r
                        if i > 0.0:
                            i = 0.0
                    if s + i * k_s <= 0.0:
                        i = -s / k_s
                        empty = True
        cur[k] = i
        volt[k] = ocv + i * r
        soc[k] = s
        res[k] = r
        s = s + i * k_s
        if s < 0.0:
            s = 0.0
        if s > usable:
            s = usable
    state[_S] = s
    state[_FULL] = 1.0 if full else 0.0
    state[_EMPTY] = 1.0 if empty else 0.0
    state[_PLEFT] = pleft
    state[_PBASE] = pbase
    state[_PDELTA] = pdelta
    state[_CV] = 1.0 if cv else 0.0
    return cur, volt, soc, res, p_exec, s_exec, f_event


# --------------------------------------------------------------------------
# day inputs


@dataclass(eq=False)
class SimDay:
    """One simulated chunk: telemetry columns plus ground truth."""

    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    power: np.ndarray
    temperature: np.ndarray
    true_current: np.ndarray
    true_voltage: np.ndarray
    true_temperature: np.ndarray
    soc: np.ndarray            # empty-anchored, % of nominal, before the sample's current
    resistance: np.ndarray     # system ohms at each sample
    pulse_exec: np.ndarray
    spike_exec: np.ndarray
    full_event: np.ndarray
    pulse_len: np.ndarray
    pulse_delta: np.ndarray
    battery: SimBattery


def _season(doy: float) -> float:
    return math.sin(2.0 * math.pi * (doy - 80.0) / 365.25)


class _DayInputs:
    """Household request and scripted traces; carries the load noise state."""

    def __init__(self, scenario: LoadScenario, seed: int) -> None:
        self.sc = scenario
        self.seed = int(seed)
        a = math.exp(-1.0 / scenario.load_tau_s)
        self._ar = (np.array([math.sqrt(1.0 - a * a) * scenario.load_sigma]), np.array([1.0, -a]))
        self._zi = np.zeros(1)

    def build(self, day: int, t0: float, battery: SimBattery):
        sc = self.sc
        c = battery.capacity_ah
        rng = np.random.default_rng([self.seed, day])
        k = np.arange(DAY_S)
        t = t0 + k
        hour = ((t0 % DAY_S) + k) / 3600.0 % 24.0
        doy = datetime.fromtimestamp(t0, tz=timezone.utc).timetuple().tm_yday
        season = _season(doy)

        temp = (sc.temp_mean_c + sc.temp_season_c * math.sin(2.0 * math.pi * (doy - 110.0) / 365.25)
                + sc.temp_daily_c * np.sin(2.0 * math.pi * (hour - 9.0) / 24.0))

        innov = rng.standard_normal(DAY_S)
        cloud = rng.uniform(sc.cloud_min, 1.0)
        if sc.household:
            b, a = self._ar
            ou, self._zi = lfilter(b, a, innov, zi=self._zi)
            shape = (sc.load_c + sc.load_evening_c * np.exp(-0.5 * ((hour - 19.5) / 2.0) ** 2)
                     + 0.5 * sc.load_evening_c * np.exp(-0.5 * ((hour - 7.0) / 1.0) ** 2))
            load = c * shape * np.maximum(0.0, 1.0 + ou)
            daylen = 12.0 + 4.0 * season
            amp = sc.pv_peak_c * c * cloud * (sc.pv_winter_fraction + (1.0 - sc.pv_winter_fraction) * 0.5 * (1.0 + season))
            x = (hour - 13.0) / daylen
            pv = np.where(np.abs(x) < 0.5, amp * np.cos(np.pi * x) ** 2, 0.0)
            req = pv - load
        else:
            req = np.zeros(DAY_S)
        rel = t - sc.start
        for s0, s1, amps in sc.segments:
            req[(rel >= s0) & (rel < s1)] = amps

        p_start = np.zeros(DAY_S, np.int8)
        p_len = np.zeros(DAY_S, np.int32)
        p_delta = np.zeros(DAY_S)
        n_p = rng.poisson(sc.pulses_per_day) if sc.pulses_per_day > 0 else 0
        at = rng.integers(60, DAY_S - 60, size=n_p)
        hold = rng.integers(sc.pulse_hold_s[0], sc.pulse_hold_s[1] + 1, size=n_p)
        p_start[at] = 1
        p_len[at] = hold + 1
        p_delta[at] = -sc.pulse_c * c
        for ts, dc, h in sc.pulse_schedule:
            j = int(round(ts - (t0 - sc.start)))
            if 0 <= j < DAY_S:
                p_start[j] = 1
                p_len[j] = int(h) + 1
                p_delta[j] = dc * c

        spike = np.zeros(DAY_S)
        n_s = rng.poisson(sc.spikes_per_day) if sc.spikes_per_day > 0 else 0
        spike[rng.integers(60, DAY_S - 60, size=n_s)] = sc.spike_c * c

        nv = rng.standard_normal(DAY_S) * sc.noise_v
        ni = rng.standard_normal(DAY_S) * sc.noise_i
        nt = rng.standard_normal(DAY_S) * sc.noise_t
        return t.astype(np.float64), req, temp, p_start, p_len, p_delta, spike, (nv, ni, nt)


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class Segment:
    battery: SimBattery
    start: float
    days: int


@dataclass(frozen=True, eq=False)
class Simulation:
    """Deterministic, re-iterable simulation over one or more segments.

    Segments are simulated back to back in time order; a time gap between
    them appears as a telemetry gap.  SOC carries over between segments
    measured from the full end, so LLI removes charge at the bottom.
    """

    segments: tuple[Segment, ...]
    scenario: LoadScenario
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigOutOfRange("at least one segment is required")
        for a, b in zip(self.segments, self.segments[1:]):
            if b.start < a.start + a.days * DAY_S:
                raise ConfigOutOfRange("segments overlap")

    @property
    def n_samples(self) -> int:
        return sum(s.days for s in self.segments) * DAY_S

    def iter_days(self) -> Iterator[SimDay]:
        sc = self.scenario
        inputs = _DayInputs(sc, self.seed)
        first = self.segments[0].battery
        state = np.zeros(7)
        state[_S] = min(sc.initial_soc, first.usable_pct)
        usable_prev = first.usable_pct
        for seg in self.segments:
            bat = seg.battery
            state[_S] = min(max(state[_S] - (usable_prev - bat.usable_pct), 0.0), bat.usable_pct)
            state[_FULL] = 0.0
            usable_prev = bat.usable_pct
            grid, vtab = bat.ocv_table()
            n = bat.cells_series
            surf = bat.dcr_surface
            rpar = np.array([surf.r0, surf.k_soc, surf.tau_soc, surf.k_temp, surf.tau_temp, bat.dcr_factor])
            pre = bat.preset
            lim = np.array([
                sc.max_charge_c * bat.capacity_ah,
                sc.max_discharge_c * bat.capacity_ah,
                n * (pre.v_eoc + sc.cv_offset_v_cell),
                sc.taper_cutoff_c * bat.capacity_ah,
                sc.recharge_hysteresis_pp,
                sc.pulse_min_soc,
                n * (pre.v_eod - sc.eod_margin_v_cell),
                0.01 * bat.capacity_ah,
            ])
            for d in range(seg.days):
                t0 = seg.start + d * DAY_S
                day = int(round((t0 - sc.start) / DAY_S))
                t, req, temp, p_start, p_len, p_delta, spike, noise = inputs.build(day, t0, bat)
                cur, volt, soc, res, p_exec, s_exec, f_ev = _kernel(
                    state, grid, vtab, n, rpar, bat.usable_pct, bat.capacity_ah, req, temp,
                    p_start, p_len, p_delta, spike, lim)
                nv, ni, nt = noise
                vm = volt + nv
                im = cur + ni
                tm = temp + nt
                if sc.quantize:
                    vm = np.round(vm, 4)
                    im = np.round(im, 3)
                    tm = np.round(tm, 2)
                pm = vm * im
                if sc.quantize:
                    pm = np.round(pm, 2)
                yield SimDay(t, vm, im, pm, tm, cur, volt, temp, soc, res,
                             p_exec, s_exec, f_ev, p_len, p_delta, bat)

    def stream(self, settings: IngestSettings | None = None) -> TelemetryStream:
        """The measured telemetry as a re-iterable stream (regenerated per pass)."""
        settings = settings or IngestSettings()

        def factory(stats: IngestStats) -> Iterator[list[np.ndarray]]:
            row = 0
            for day in self.iter_days():
                cols = [day.t, day.voltage, day.current, day.power, day.temperature]
                stats.rows_read += len(day.t)
                yield _validate(cols, stats, lambda k, lo=row: k + lo + 2)
                row += len(day.t)

        return TelemetryStream(factory, settings, ["<simulation>"])

    def event_log(self) -> dict:
        """Ground-truth event log, built by streaming the days without keeping them."""
        log = _EventLogBuilder(self)
        for day in self.iter_days():
            log.add(day)
        return log.finish()

    def run(self) -> "SimResult":
        """Simulate everything in memory."""
        log = _EventLogBuilder(self)
        days = []
        for day in self.iter_days():
            log.add(day)
            days.append(day)
        cat = {name: np.concatenate([getattr(d, name) for d in days])
               for name in ("t", "voltage", "current", "power", "temperature", "soc",
                            "true_current", "true_voltage", "resistance")}
        return SimResult(cat["t"], cat["voltage"], cat["current"], cat["power"], cat["temperature"],
                         cat["soc"], cat["true_current"], cat["true_voltage"], cat["resistance"],
                         log.finish())

    def write(self, out_dir: str | Path, prefix: str = "") -> dict[str, Path]:
        """Stream telemetry CSV, event log JSON and per-sample true SOC to ``out_dir``."""
        import pyarrow as pa
        import pyarrow.csv as pacsv

        from ..io import atomic_path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "telemetry": out / f"{prefix}telemetry.csv",
            "event_log": out / f"{prefix}event_log.json",
            "true_soc": out / f"{prefix}true_soc.npy",
        }
        log = _EventLogBuilder(self)
        opts = pacsv.WriteOptions(include_header=False)
        with atomic_path(paths["telemetry"]) as tmp_csv, atomic_path(paths["true_soc"]) as tmp_npy:
            truth = np.lib.format.open_memmap(tmp_npy, mode="w+", dtype=np.float64, shape=(self.n_samples,))
            row = 0
            with open(tmp_csv, "wb") as fh:
                fh.write(CSV_HEADER.encode())
                for day in self.iter_days():
                    table = pa.table({
                        "timestamp": day.t.astype(np.int64),
                        "voltage_v": day.voltage,
                        "current_a": day.current,
                        "power_w": day.power,
                        "temperature_c": day.temperature,
                    })
                    pacsv.write_csv(table, fh, write_options=opts)
                    truth[row:row + len(day.t)] = day.soc
                    row += len(day.t)
                    log.add(day)
            truth.flush()
            del truth
        write_event_log(log.finish(), paths["event_log"])
        return paths


@dataclass(frozen=True, eq=False)
class SimResult:
    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    power: np.ndarray
    temperature: np.ndarray
    soc: np.ndarray
    true_current: np.ndarray
    true_voltage: np.ndarray
    resistance: np.ndarray
    event_log: dict

    def stream(self, settings: IngestSettings | None = None) -> TelemetryStream:
        return TelemetryStream.from_arrays(self.t, self.voltage, self.current, self.power,
                                           self.temperature, settings)


def generate(battery: SimBattery, scenario: LoadScenario, seed: int = 0) -> SimResult:
    """Simulate ``scenario.days`` days of one battery in memory."""
    return Simulation((Segment(battery, scenario.start, scenario.days),), scenario, seed).run()


def simulate_years(battery: SimBattery, scenario: LoadScenario, years: int, seed: int = 0,
                   days_per_year: int | None = None, start_doy: int = 1) -> Simulation:
    """Consecutive calendar years, the battery aged by one year per segment.

    ``days_per_year`` shortens each segment to a window starting on day
    ``start_doy`` of the year, which keeps multi-year tests fast.
    """
    if years < 1:
        raise ConfigOutOfRange("years must be >= 1")
    y0 = datetime.fromtimestamp(scenario.start, tz=timezone.utc).year
    segs = []
    for k in range(years):
        begin = datetime(y0 + k, 1, 1, tzinfo=timezone.utc).timestamp()
        end = datetime(y0 + k + 1, 1, 1, tzinfo=timezone.utc).timestamp()
        start = begin + (start_doy - 1) * DAY_S
        days = int((end - start) // DAY_S) if days_per_year is None else int(days_per_year)
        if start + days * DAY_S > end:
            raise ConfigOutOfRange("segment runs past the end of its year")
        segs.append(Segment(age(battery, k), start, days))
    return Simulation(tuple(segs), replace(scenario, start=segs[0].start), seed)


# --------------------------------------------------------------------------
# event log


class _EventLogBuilder:
    def __init__(self, sim: Simulation) -> None:
        self.sim = sim
        self.pulses: list[dict] = []
        self.spikes: list[dict] = []
        self.full: list[dict] = []
        self.phases: list[dict] = []
        self._run: list | None = None  # [start_t, sign, soc_start, last_t, last_soc]
        self._last_t = None
        self.rows = 0

    def add(self, day: SimDay) -> None:
        bat = day.battery
        usable = bat.usable_pct
        for k in np.flatnonzero(day.pulse_exec):
            pre = max(k - 1, 0)
            self.pulses.append({
                "t_pre": int(day.t[pre]), "t_step": int(day.t[k]),
                "t_end": int(day.t[k] + day.pulse_len[k] - 1),
                "delta_a": float(day.pulse_delta[k]),
                "current_before_a": float(day.true_current[pre]),
                "soc_true": float(day.soc[pre] + 100.0 - usable),
                "temperature_c": float(day.true_temperature[pre]),
                "dcr_true_ohm": float(day.resistance[pre]),
            })
        for k in np.flatnonzero(day.spike_exec):
            self.spikes.append({"t": int(day.t[k]), "current_a": float(day.true_current[k])})
        for k in np.flatnonzero(day.full_event):
            self.full.append({"t": int(day.t[k]), "soc_true": float(day.soc[k] + 100.0 - usable)})
        self._phases(day, usable)
        self.rows += len(day.t)

    def _phases(self, day: SimDay, usable: float) -> None:
        idle = 0.01 * day.battery.capacity_ah
        sign = np.where(day.true_current > idle, 1, np.where(day.true_current < -idle, -1, 0))
        top = day.soc + 100.0 - usable
        change = np.flatnonzero(np.diff(sign)) + 1
        bounds = np.concatenate([[0], change, [len(sign)]])
        gap = self._last_t is not None and day.t[0] - self._last_t > 1.5
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sg = int(sign[lo])
            run = self._run
            if run is not None and (run[1] != sg or lo > 0 or gap):
                self._close()
                run = None
            if sg == 0:
                continue
            if run is None:
                self._run = [float(day.t[lo]), sg, float(top[lo]), float(day.t[hi - 1]), float(top[hi - 1])]
            else:
                run[3], run[4] = float(day.t[hi - 1]), float(top[hi - 1])
        self._last_t = float(day.t[-1])

    def _close(self) -> None:
        r = self._run
        self._run = None
        if r is None or r[3] - r[0] < 60:
            return
        self.phases.append({"start": int(r[0]), "end": int(r[3]),
                            "direction": "charge" if r[1] > 0 else "discharge",
                            "soc_start": r[2], "soc_end": r[4]})

    def finish(self) -> dict:
        self._close()
        sim = self.sim
        segs = []
        for seg in sim.segments:
            bat = seg.battery
            grid, v = bat.ocv_table()
            pick = np.unique(np.concatenate([np.arange(0, len(grid), 25), [len(grid) - 1]]))
            segs.append({
                "start": int(seg.start), "days": seg.days,
                "battery": bat.to_dict(),
                "usable_pct": bat.usable_pct,
                "capacity_fade_pp": 100.0 - bat.usable_pct,
                "ocv_cell": {"soc_full_frame": [float(x) for x in bat.top_frame(grid[pick])],
                             "voltage": [float(x) for x in v[pick]]},
                "ic_peaks_v": true_ic_peaks(bat),
            })
        return {
            "version": EVENT_LOG_VERSION,
            "seed": sim.seed,
            "scenario": sim.scenario.to_dict(),
            "samples": self.rows,
            "true_soc": {"file": "true_soc.npy", "frame": "empty-anchored % of nominal",
                         "full_frame_offset_per_segment": [100.0 - s.battery.usable_pct for s in sim.segments]},
            "segments": segs,
            "pulses": self.pulses,
            "spikes": self.spikes,
            "full_charges": self.full,
            "phases": self.phases,
        }


def true_ic_peaks(battery: SimBattery, step: float = 1e-4) -> list[float]:
    """Local maxima of the analytic IC curve (cell volts)."""
    pre = battery.preset
    v = np.arange(pre.v_eod, pre.v_eoc + step / 2, step)
    ic = battery.true_ic(v)
    # flat tails tie to machine precision, so demand a real rise on both sides
    k, _ = find_peaks(ic, prominence=1e-6 * float(np.max(ic)))
    return [round(float(v[j]), 4) for j in k]


def write_event_log(log: dict, path: str | Path) -> None:
    from ..io import write_json

    write_json(path, log)


def load_event_log(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def segment_bounds(log: dict) -> list[tuple[int, int]]:
    return [(s["start"], s["start"] + s["days"] * DAY_S) for s in log["segments"]]


# --------------------------------------------------------------------------
# configuration


def build_simulation(section: dict | None = None, chemistry: str | None = None, seed: int | None = None,
                     days: int | None = None, years: int | None = None) -> tuple[Simulation, SimBattery]:
    """Simulation from a ``[sim]`` config mapping; explicit arguments win.

    Keys: ``seed``, ``days``, ``years``, ``days_per_year``, ``start_doy``,
    ``battery`` (preset, cells_series, capacity_ah), ``degradation``,
    ``dcr_surface`` and ``scenario`` (any :class:`LoadScenario` field).
    """
    from .battery import Degradation, DcrSurface
    from .presets import preset_for

    sec = dict(section or {})
    known = {"seed", "days", "years", "days_per_year", "start_doy", "battery", "degradation",
             "dcr_surface", "scenario"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigOutOfRange(f"unknown [sim] keys: {sorted(unknown)}")
    bat = dict(sec.get("battery", {}))
    preset = preset_for(chemistry or bat.pop("preset", "LmoNmcBlend"))
    bat.pop("preset", None)
    deg = dict(sec.get("degradation", {}))
    for key in ("lam_plateau_scale", "peak_shift_v"):
        if key in deg:
            deg[key] = tuple(deg[key])
    try:
        battery = SimBattery(preset=preset, degradation=Degradation(**deg),
                             dcr_surface=DcrSurface(**sec.get("dcr_surface", {})), **bat)
    except TypeError as exc:
        raise ConfigOutOfRange(str(exc)) from None
    scenario = LoadScenario.from_dict(sec.get("scenario", {}))
    seed = int(sec.get("seed", 0) if seed is None else seed)
    if days is not None and years is None:
        years = None  # an explicit day count wins over a configured year count
    elif years is None:
        years = sec.get("years")
    days = days if days is not None else sec.get("days")
    start_doy = int(sec.get("start_doy", 1))
    if years:
        return simulate_years(battery, scenario, int(years), seed, sec.get("days_per_year"), start_doy), battery
    n = int(days or scenario.days)
    start = scenario.start + (start_doy - 1) * DAY_S
    sc = replace(scenario, days=n, start=start)
    return Simulation((Segment(battery, start, n),), sc, seed), battery
