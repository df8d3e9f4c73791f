"""Static SVG overlays of per-period qOCV, IC and DV curves with FOI markers.

Plots are rendered from the artifact directory written by the other
stages, so they can be regenerated without re-reading telemetry.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_path  # noqa: E402

_RC = {"svg.hashsalt": "ocvtrack", "svg.fonttype": "none", "font.size": 8}


def _read_xy(path: Path, xcol: str, ycol: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r[xcol]) for r in rows])
    y = np.array([float(r[ycol]) if r[ycol] != "" else np.nan for r in rows])
    return x, y


def _markers(out: Path, direction: str) -> dict[str, list[tuple[int, float]]]:
    """IC peak positions per period from the FOI position tracks."""
    marks: dict[str, list[tuple[int, float]]] = {}
    for p in sorted((out / "foi").glob(f"{direction}_foi*_Pos.csv")):
        foi_id = int(p.stem.split("_foi")[1].split("_")[0])
        with open(p, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                marks.setdefault(row["period"], []).append((foi_id, float(row["raw"])))
    return marks


def plot_directory(out_dir: str | Path, dest: str | Path | None = None) -> list[Path]:
    """Render one SVG per (system, direction) found under ``out_dir/qocv``."""
    out = Path(out_dir)
    dest = Path(dest) if dest is not None else out / "plots"
    metas = sorted((out / "qocv").glob("*.json"))
    groups: dict[tuple[str, str], list[dict]] = {}
    for m in metas:
        if m.name == "skipped.json":
            continue
        meta = json.loads(m.read_text(encoding="utf-8"))
        meta["_stem"] = m.stem
        groups.setdefault((meta["system"], meta["direction"]), []).append(meta)
    written = []
    for (system, direction), metas in sorted(groups.items()):
        metas.sort(key=lambda d: d["period"])
        written.append(_plot_group(out, dest, system, direction, metas))
    return written


def _plot_group(out: Path, dest: Path, system: str, direction: str, metas: list[dict]) -> Path:
    marks = _markers(out, direction)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.4), constrained_layout=True)
        cmap = plt.get_cmap("viridis")
        n = len(metas)
        for k, meta in enumerate(metas):
            color = cmap(k / max(n - 1, 1))
            stem, period = meta["_stem"], meta["period"]
            cells = meta.get("cells_series", 1)
            v, s = _read_xy(out / "qocv" / f"{stem}.csv", "voltage_v", "mean_soc_pct")
            axes[0].plot(s, v / cells, color=color, lw=1.0, label=period)
            ic_path = out / "ic" / f"{stem}.csv"
            if ic_path.exists():
                x, y = _read_xy(ic_path, "x", "y")
                axes[1].plot(x, y, color=color, lw=1.0)
                for foi_id, pos in marks.get(period, []):
                    axes[1].plot([pos], [np.interp(pos, x, y)], marker="v", ms=4, color=color, ls="none")
                    if k == 0:
                        axes[1].annotate(str(foi_id), (pos, np.interp(pos, x, y)), xytext=(0, 5),
                                         textcoords="offset points", ha="center", fontsize=7)
            dv_path = out / "dv" / f"{stem}.csv"
            if dv_path.exists():
                x, y = _read_xy(dv_path, "x", "y")
                axes[2].plot(x, y * 1000.0, color=color, lw=1.0)
        axes[0].set_xlabel("SOC (%)")
        axes[0].set_ylabel("qOCV per cell (V)")
        axes[0].legend(loc="lower right", frameon=False)
        axes[1].set_xlabel("voltage per cell (V)")
        axes[1].set_ylabel("IC dSOC/dV (%/V)")
        axes[2].set_xlabel("SOC (%)")
        axes[2].set_ylabel("DV dV/dSOC (mV/%)")
        lo, hi = _dv_limits(out, metas)
        if hi > lo:
            axes[2].set_ylim(lo, hi)
        fig.suptitle(f"{system} {direction}")
        path = dest / f"{system}_{direction}.svg"
        path.parent.mkdir(parents=True, exist_ok=True)
        with atomic_path(path) as tmp:
            fig.savefig(tmp, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path


def _dv_limits(out: Path, metas: list[dict]) -> tuple[float, float]:
    """Clip the steep DV ends so the interior peaks stay readable."""
    vals = []
    for meta in metas:
        p = out / "dv" / f"{meta['_stem']}.csv"
        if p.exists():
            x, y = _read_xy(p, "x", "y")
            inner = y[(x > x[0] + 5) & (x < x[-1] - 5)] * 1000.0
            vals.extend(inner[np.isfinite(inner)].tolist())
    if not vals:
        return 0.0, 0.0
    hi = float(np.max(vals))
    return 0.0, hi * 1.15
