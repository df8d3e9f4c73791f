"""Command line entry point.

Exit codes: 0 success, 2 usage error / missing input / invalid config,
3 data-dependent failure, 1 anything unexpected.  Each stage writes into a
staging directory and moves its files into ``--out`` only on success.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import Chemistry, ConfigError, RunConfig, SystemConfig, read_config_file
from .errors import ConfigOutOfRange, OcvTrackError, UnknownChemistry
from .io import write_json
from .report import Report

log = logging.getLogger("ocvtrack")

EXIT_OK, EXIT_UNEXPECTED, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

ANALYSIS = ("ingest-check", "dcr", "qocv", "diff", "foi", "correlate", "pipeline")
_DEPTH = {name: k for k, name in enumerate(ANALYSIS)}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory (default: output_dir from config, else ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--input", type=Path, nargs="+", required=True, help="telemetry CSV file(s)")
    analysis.add_argument("--period", choices=("year", "month"), help="qOCV period")
    analysis.add_argument("--direction", choices=("charge", "discharge", "both"))
    analysis.add_argument("--chemistry", help="override the system chemistry (FOI catalog)")

    p = argparse.ArgumentParser(prog="ocvtrack", description="qOCV, ICA/DVA and FOI tracking for battery telemetry")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "ingest-check": "validate telemetry and report SOC anchoring",
        "dcr": "DCR lookup tables and yearly trends",
        "qocv": "phase selection and fused qOCV curves",
        "diff": "IC and DV curves",
        "foi": "FOI tracks and degradation-mode report",
        "correlate": "Pearson r and p of FOI tracks against SOH",
        "pipeline": "all stages plus plots",
    }
    for name in ANALYSIS:
        sp = sub.add_parser(name, parents=[common, analysis], help=helps[name])
        if name in ("correlate", "pipeline"):
            sp.add_argument("--soh", type=Path, required=(name == "correlate"),
                            help="CSV with header period,soh_pct")
        if name == "pipeline":
            sp.add_argument("--no-plots", action="store_true")
    sp = sub.add_parser("simulate", parents=[common], help="synthetic telemetry with ground truth")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--chemistry")
    sp.add_argument("--days", type=int)
    sp.add_argument("--years", type=int)
    sp = sub.add_parser("plot", parents=[common], help="SVG overlays from an artifact directory")
    sp.add_argument("--input", type=Path, required=True, help="directory written by pipeline/diff/foi")
    return p


# --------------------------------------------------------------------------
# config


def _load(args) -> tuple[RunConfig, dict]:
    raw: dict = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        raw = read_config_file(args.config)
    sim = raw.get("sim", {})
    run = RunConfig.from_mapping(raw)
    if getattr(args, "period", None):
        run = replace(run, qocv=replace(run.qocv, period=args.period))
    if getattr(args, "direction", None):
        run = replace(run, qocv=replace(run.qocv, direction=args.direction))
    if args.out is None:
        args.out = Path(run.output_dir or "out")
    return run, sim


def _system(run: RunConfig, chemistry: str | None) -> SystemConfig:
    if run.system is None:
        raise UsageError("the config needs a [system] section for analysis stages")
    system = run.system
    if chemistry:
        system = replace(system, chemistry=Chemistry.parse(chemistry))
    return system


# --------------------------------------------------------------------------
# staging


class _Stage:
    """Write into a hidden staging directory, then move files into place."""

    def __init__(self, out: Path) -> None:
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))

    def commit(self) -> None:
        files = sorted(p for p in self.tmp.rglob("*") if p.is_file())
        manifest = [p for p in files if p.name == "manifest.json" and p.parent == self.tmp]
        for p in [f for f in files if f not in manifest] + manifest:
            dest = self.out / p.relative_to(self.tmp)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(p, dest)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)
        try:
            self.out.rmdir()  # only succeeds if we created it empty
        except OSError:
            pass


def _staged(out: Path, fn) -> None:
    created = not out.exists()
    stage = _Stage(out)
    try:
        fn(stage.tmp)
    except BaseException:
        stage.abort()
        if created and out.exists() and not any(out.iterdir()):
            out.rmdir()
        raise
    stage.commit()


# --------------------------------------------------------------------------
# commands


def _analysis(args) -> None:
    from . import pipeline as pl
    from . import report as rp
    from .ingest import SocCounter, read_stream
    from .stats import read_soh

    for p in args.input:
        if not p.is_file():
            raise UsageError(f"input file not found: {p}")
    soh_path = getattr(args, "soh", None)
    if soh_path is not None and not soh_path.is_file():
        raise UsageError(f"SOH file not found: {soh_path}")
    run, _ = _load(args)
    system = _system(run, args.chemistry)
    depth = _DEPTH[args.command]
    stream = read_stream(args.input, system, run.ingest)
    inputs = list(args.input) + ([soh_path] if soh_path else [])

    def work(tmp: Path) -> None:
        rep = Report(tmp)
        if depth == _DEPTH["ingest-check"]:
            counter = SocCounter(system, run.soc)
            for chunk in stream:
                counter.update(chunk)
            est = counter.initial_soc_estimate()
            soc = {"full_charge_anchors": len(counter.anchors), "anchored": bool(counter.anchors),
                   "initial_soc_estimate": est, "clamp_count": counter.clamp_count,
                   "anchor_drifts_pp": counter.anchor_drifts}
            rp.write_ingest(rep, stream.stats, soc)
            rep.manifest(args.command, inputs, run, stream.stats.to_dict())
            return
        sc = pl.scan(stream, system, run)
        counts = sc.counts()
        rp.write_scan(rep, sc)
        yearly = pl.yearly_tables(sc.tables, run, sc.pulses)
        rp.write_dcr(rep, sc.tables, yearly, pl.dcr_trends(yearly, run))
        if depth >= _DEPTH["qocv"]:
            pc = pl.build_curves(sc.partials, system, run)
            rp.write_curves(rep, pc, system, pl.fade_table(pc, system))
            counts["qocv_curves"] = len(pc.curves)
        if depth >= _DEPTH["diff"]:
            diffs = pl.differentiate(pc, system, run)
            rp.write_diffs(rep, diffs, system)
        if depth >= _DEPTH["foi"]:
            foi = pl.foi_analysis(pc, diffs, system, run)
            rp.write_foi(rep, foi)
            counts["foi_tracks"] = sum(len(t) for t in foi.tracks.values())
        if depth >= _DEPTH["correlate"] and soh_path is not None:
            from .stats import correlate_tracks

            soh = read_soh(soh_path)
            results, skipped = {}, {}
            for direction, tracks in foi.tracks.items():
                results[direction], skipped[direction] = correlate_tracks(tracks, soh)
            rp.write_correlations(rep, results, skipped)
        if args.command == "pipeline" and not args.no_plots:
            from .plotting import plot_directory

            for p in plot_directory(tmp):
                rep.add(p)
        rep.manifest(args.command, inputs, run, counts)

    _staged(args.out, work)


def _simulate(args) -> None:
    from .sim.generate import build_simulation, system_config

    run, section = _load(args)
    sim, battery = build_simulation(section, args.chemistry, args.seed, args.days, args.years)
    system = run.system or system_config(battery)

    def work(tmp: Path) -> None:
        paths = sim.write(tmp)
        used = {**section, "seed": sim.seed}
        if args.days is not None:
            used["days"] = args.days
        if args.years is not None:
            used["years"] = args.years
        if args.chemistry:
            used["battery"] = {**used.get("battery", {}), "preset": Chemistry.parse(args.chemistry).value}
        cfg = {"system": system.to_dict(), "sim": used}
        write_json(tmp / "config.json", cfg)
        rep = Report(tmp)
        for p in list(paths.values()) + [tmp / "config.json"]:
            rep.add(p)
        rep.manifest("simulate", [], run, {"samples": sim.n_samples, "segments": len(sim.segments)},
                     {"seed": sim.seed})

    _staged(args.out, work)


def _plot(args) -> None:
    from .plotting import plot_directory

    if not args.input.is_dir():
        raise UsageError(f"artifact directory not found: {args.input}")
    if not (args.input / "qocv").is_dir():
        raise UsageError(f"{args.input} holds no qocv/ artifacts; run pipeline or diff first")
    written = plot_directory(args.input, args.out)
    for p in written:
        print(p)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            _simulate(args)
        elif args.command == "plot":
            _plot(args)
        else:
            _analysis(args)
    except (UsageError, ConfigError, ConfigOutOfRange, UnknownChemistry, FileNotFoundError) as exc:
        print(f"ocvtrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OcvTrackError as exc:
        print(f"ocvtrack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"ocvtrack: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
