"""Metric-versus-t panels rendered to SVG with matplotlib.

Each curve kind is one polyline (element id ``curve-<kind>``) with a
vertex per sampled t. The straight line between the endpoint values is drawn
dashed (``interpolant``); for the losses the tolerance band on the failing
side of it is shaded (``tau-band``).
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import ConfigError  # noqa: E402
from ..mcu_eval import METRIC_FIELDS  # noqa: E402

_STYLE = {
    "svg.hashsalt": "mculab",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def emit_plot(tables: dict, metric: str, path, tau: float = 0.05) -> str:
    """Write one SVG panel of ``metric`` against t for every curve kind in ``tables``."""
    if metric not in METRIC_FIELDS:
        raise ConfigError(f"unknown metric {metric!r}; valid names: {', '.join(METRIC_FIELDS)}")
    if not tables:
        raise ConfigError("nothing to plot")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ref = None
        for kind, records in tables.items():
            ts = [r.t for r in records]
            ys = [getattr(r, metric) for r in records]
            (line,) = ax.plot(ts, ys, label=kind, linewidth=1.5)
            line.set_gid(f"curve-{kind}")
            if ref is None:
                ref = (ts, ys)
        ts, ys = ref
        y0, y1 = ys[0], ys[-1]
        if not (math.isnan(y0) or math.isnan(y1)):
            interp = [(1.0 - t) * y0 + t * y1 for t in ts]
            (dash,) = ax.plot(ts, interp, linestyle="--", color="0.4", linewidth=1.0, label="interpolant")
            dash.set_gid("interpolant")
            if metric == "loss_retain":
                band = ax.fill_between(ts, interp, [v + tau for v in interp], color="0.85", label=f"tau={tau:g}")
            elif metric == "loss_forget":
                band = ax.fill_between(ts, [v - tau for v in interp], interp, color="0.85", label=f"tau={tau:g}")
            else:
                band = None
            if band is not None:
                band.set_gid("tau-band")
            marks = ax.scatter([ts[0], ts[-1]], [y0, y1], color="k", zorder=3, s=18)
            marks.set_gid("endpoints")
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("t")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.fspath(path)
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path
