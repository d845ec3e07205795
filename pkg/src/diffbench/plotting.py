"""Log-log runtime figures from timing records."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from diffbench.errors import UsageError  # noqa: E402

UNFINISHED = ("timeout", "crashed")


def series_of(records, relative: bool = True) -> dict[str, dict]:
    """Per-series points in size order, cut at the first unfinished run.

    Keys are the engine name, prefixed by the objective when records mix
    objectives.  Each value holds ``x``, ``y`` and ``ended`` (True when the
    series stopped on a timeout or crash).
    """
    records = list(records)
    mixed = len({r.objective for r in records}) > 1
    grouped = defaultdict(list)
    for r in records:
        key = f"{r.objective}/{r.engine}" if mixed else r.engine
        grouped[key].append(r)
    out = {}
    for key, recs in grouped.items():
        recs.sort(key=lambda r: r.n_params_or_meas)
        xs, ys, ended = [], [], False
        for r in recs:
            if r.status in UNFINISHED:
                ended = True
                break
            y = r.rel if relative else r.der_s
            if r.status != "ok" or y is None:
                continue
            xs.append(r.n_params_or_meas)
            ys.append(y)
        out[key] = {"x": xs, "y": ys, "ended": ended}
    return out


def axis_limits(series) -> tuple[tuple[float, float], tuple[float, float]]:
    """Data range of all series padded by one decade on each side."""
    xs = [x for s in series.values() for x in s["x"]]
    ys = [y for s in series.values() for y in s["y"]]
    if not xs:
        raise UsageError("no finished timing records to plot")
    return (min(xs) / 10.0, max(xs) * 10.0), (min(ys) / 10.0, max(ys) * 10.0)


def emit_plot(records, out_svg, relative: bool = True, title: str | None = None) -> Path:
    """Write a log-log SVG with one line per series.

    Every finished point gets a marker; series cut short by a timeout or crash
    get a black dot on their last finished point.  Axis limits pad the data
    range by one decade on each side.
    """
    records = list(records)
    if not records:
        raise UsageError("no timing records to plot")
    series = series_of(records, relative)
    xlim, ylim = axis_limits(series)

    fig, ax = plt.subplots(figsize=(7, 5))
    for key, s in series.items():
        if not s["x"]:
            continue
        (line,) = ax.plot(s["x"], s["y"], marker="o", label=key)
        line.set_gid(f"series-{key}")
        if s["ended"]:
            (end,) = ax.plot(s["x"][-1:], s["y"][-1:], "o", color="black", markersize=9, zorder=5)
            end.set_gid(f"end-{key}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlim(*xlim)
    ax.set_ylim(*ylim)
    ax.set_xlabel("problem size (parameters or measurements)")
    ax.set_ylabel("derivative time / objective time" if relative else "derivative time [s]")
    if title:
        ax.set_title(title)
    ax.grid(True, which="major", alpha=0.3)
    ax.legend()
    out_svg = Path(out_svg)
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return out_svg
