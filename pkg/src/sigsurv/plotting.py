"""Figure rendering for CLI reports.

All functions write a PNG next to the delimited outputs and return the path.
The Agg backend keeps rendering headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_SIZE = (6.4, 4.0)

plt.rcParams.update({
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
})


def _finish(fig, out_path):
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def metric_figure(report, out_path):
    """C-index and Brier score against the prediction time."""
    rows = report.rows
    t = [r["t"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for ax, key, label in ((axes[0], "c_index", "C-index"),
                           (axes[1], "brier", "Brier score")):
        vals = [r[key] for r in rows]
        ts = [ti for ti, v in zip(t, vals) if v is not None]
        vs = [v for v in vals if v is not None]
        ax.plot(ts, vs, "o-")
        avg = report.averages.get(key)
        if avg is not None:
            ax.axhline(avg, color="C3", ls="--", lw=1,
                       label=f"interval mean {avg:.3f}")
            ax.legend()
        ax.set_xlabel("prediction time t")
        ax.set_ylabel(label)
    return _finish(fig, out_path)


def survival_curves_figure(curves, out_path, max_curves=40):
    """Overlay of per-record conditional survival curves r(t, dt)."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for rid, dts, risks in curves[:max_curves]:
        ax.plot(dts, risks, lw=0.8, alpha=0.6)
    ax.set_xlabel("window length dt")
    ax.set_ylabel("conditional survival")
    ax.set_ylim(-0.02, 1.02)
    return _finish(fig, out_path)


def trace_figure(trace, out_path):
    """Objective value per proximal-gradient iteration."""
    its = [row[0] for row in trace]
    objs = np.asarray([row[1] for row in trace])
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    floor = objs.min()
    gap = objs - floor
    if np.any(gap > 0):
        ax.semilogy(its, np.maximum(gap, gap[gap > 0].min() / 10))
        ax.set_ylabel("objective - best")
    else:
        ax.plot(its, objs)
        ax.set_ylabel("objective")
    ax.set_xlabel("iteration")
    return _finish(fig, out_path)


def loss_trace_figure(losses, out_path):
    """Per-epoch mean training loss."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(np.arange(1, len(losses) + 1), losses, "o-")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean negative log-likelihood")
    return _finish(fig, out_path)


def event_histogram_figure(dataset, out_path):
    """Event-time histogram; terminal censoring shows as mass at the horizon."""
    events = [r.event_time for r in dataset.records if r.event_indicator == 1]
    censored = [r.event_time for r in dataset.records if r.event_indicator == 0]
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    bins = np.linspace(0, dataset.horizon, 40)
    ax.hist(events, bins=bins, alpha=0.75, label="events")
    if censored:
        ax.hist(censored, bins=bins, alpha=0.75, label="censored")
    ax.set_xlabel("time")
    ax.set_ylabel("count")
    ax.legend()
    return _finish(fig, out_path)


def discretization_figure(result, out_path):
    """Log-log readout error against the sampling mesh with the bound."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.loglog(result.meshes, np.maximum(result.errors, 1e-300), "o-",
              label=f"measured (slope {result.slope:.2f})")
    ax.loglog(result.meshes, result.bounds, "s--", label="bound")
    ax.set_xlabel("mesh |D|")
    ax.set_ylabel("readout error")
    ax.legend()
    return _finish(fig, out_path)
