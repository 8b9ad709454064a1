"""Time-dependent evaluation metrics for survival predictions.

All metrics consume a risk vector r_i = P(T_i > t + dt | T_i > t) per record
at one evaluation point (t, dt).  Windows are closed on both ends; records
with T exactly equal to t + dt count as survivors (strict inequalities per
the displayed formulas).  Ties in risks contribute nothing to ranking
numerators.  Values below 0.5 (C-index) or above 0.25 (Brier) are legal
here: only events inside the window are compared against the still-at-risk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .timeseries import Dataset

__all__ = [
    "EvalPoint",
    "StepFunction",
    "km_censoring",
    "c_index",
    "brier",
    "weighted_brier",
    "auc_td",
    "averaged_metric",
    "MetricReport",
    "build_report",
]


@dataclass(frozen=True)
class EvalPoint:
    t: float
    delta_t: float

    def __post_init__(self):
        if self.t < 0 or self.delta_t <= 0:
            raise ValidationError("need t >= 0 and delta_t > 0")


class StepFunction:
    """Right-continuous step function given by jump locations and values."""

    def __init__(self, times, values, initial=1.0):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.initial = initial

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            out = np.full(t.shape, self.initial)
        else:
            idx = np.searchsorted(self.times, t, side="right") - 1
            out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], self.initial)
        return float(out) if out.ndim == 0 else out


def km_censoring(dataset: Dataset) -> StepFunction:
    """Kaplan-Meier estimator of the censoring survival function.

    Censorings play the role of events; the estimate drops only at censoring
    times, so fully-observed data gives G identically 1.
    """
    T = dataset.event_times()
    delta = np.array([r.event_indicator for r in dataset.records])
    censor_times = np.unique(T[delta == 0])
    surv = 1.0
    values = []
    for c in censor_times:
        at_risk = int(np.sum(T >= c))
        d = int(np.sum((T == c) & (delta == 0)))
        surv *= 1.0 - d / at_risk
        values.append(surv)
    return StepFunction(censor_times, values)


def _arrays(dataset: Dataset):
    T = dataset.event_times()
    delta = np.array([r.event_indicator for r in dataset.records])
    return T, delta


def c_index(risks, dataset: Dataset, ep: EvalPoint):
    """Time-dependent concordance; None when no comparable pair exists.

    Pairs (i, j) with an in-window event j (T_j in [t, t+dt], observed) and
    any later T_i are comparable; concordance asks the later survivor to
    carry the strictly larger predicted survival.
    """
    r = np.asarray(risks, dtype=float)
    T, delta = _arrays(dataset)
    j_sel = (T >= ep.t) & (T <= ep.t + ep.delta_t) & (delta == 1)
    comparable = (T[:, None] > T[None, :]) & j_sel[None, :]
    denom = int(comparable.sum())
    if denom == 0:
        return None
    concordant = comparable & (r[:, None] > r[None, :])
    return float(concordant.sum() / denom)


def brier(risks, dataset: Dataset, ep: EvalPoint) -> float:
    r = np.asarray(risks, dtype=float)
    T, delta = _arrays(dataset)
    dead = (T <= ep.t + ep.delta_t) & (delta == 1)
    alive = T > ep.t + ep.delta_t
    return float((np.where(dead, r**2, 0.0)
                  + np.where(alive, (1.0 - r) ** 2, 0.0)).mean())


def weighted_brier(risks, dataset: Dataset, ep: EvalPoint, G: StepFunction,
                   thresholds: str = "paper") -> float:
    """Censoring-weighted Brier score.

    ``thresholds='paper'`` keeps the published indicator cut at t (not
    t + dt); 'window' harmonizes both cuts with the unweighted score.
    Records whose weight would divide by G = 0 are excluded from the sum.
    """
    value, _ = _weighted_brier_detail(risks, dataset, ep, G, thresholds)
    return value


def _weighted_brier_detail(risks, dataset, ep, G, thresholds="paper"):
    if thresholds not in ("paper", "window"):
        raise ValidationError("thresholds must be 'paper' or 'window'")
    cut = ep.t if thresholds == "paper" else ep.t + ep.delta_t
    r = np.asarray(risks, dtype=float)
    T, delta = _arrays(dataset)
    dead = (T <= cut) & (delta == 1)
    alive = (T >= cut) if thresholds == "paper" else (T > cut)
    g_dead = G(T)
    g_alive = G(cut)
    # the displayed score adds the two indicator sums independently
    excluded = 0
    total = 0.0
    for i in range(T.size):
        if dead[i]:
            if g_dead[i] == 0.0:
                excluded += 1
            else:
                total += r[i] ** 2 / g_dead[i]
        if alive[i]:
            if g_alive == 0.0:
                excluded += 1
            else:
                total += (1.0 - r[i]) ** 2 / g_alive
    return total / T.size, excluded


def auc_td(risks, dataset: Dataset, ep: EvalPoint, G: StepFunction):
    """Censoring-weighted time-dependent AUC; None when a marginal is empty."""
    value, _ = _auc_detail(risks, dataset, ep, G)
    return value


def _auc_detail(risks, dataset, ep, G):
    r = np.asarray(risks, dtype=float)
    T, delta = _arrays(dataset)
    g = G(T)
    w = np.zeros(T.size)
    excluded = 0
    for i in range(T.size):
        if delta[i] == 1:
            if g[i] == 0.0:
                excluded += 1
            else:
                w[i] = 1.0 / g[i]
    survivors = T > ep.t + ep.delta_t
    in_window = (T >= ep.t) & (T <= ep.t + ep.delta_t)
    denom = survivors.sum() * float(w[in_window].sum())
    if denom == 0.0:
        return None, excluded
    num = float(
        (((r[:, None] > r[None, :]) & survivors[:, None] & in_window[None, :])
         * w[None, :]).sum()
    )
    return num / denom, excluded


def averaged_metric(risk_fn, dataset: Dataset, t1: float, t2: float,
                    delta_t: float, n_points: int = 10, metric: str = "c_index",
                    G: StepFunction | None = None) -> float:
    """Mean of a pointwise metric over a left-anchored equispaced t grid.

    The grid t_j = t1 + j (t2 - t1) / n_points, j < n_points, is the left
    rectangle approximation of the interval average; undefined points are
    skipped.  ``risk_fn(ep)`` must return the per-record risks at ep.
    """
    if not t1 < t2:
        raise ValidationError("need t1 < t2")
    if n_points < 1:
        raise ValidationError("need at least one grid point")
    h = (t2 - t1) / n_points
    values = []
    for j in range(n_points):
        ep = EvalPoint(t=t1 + j * h, delta_t=delta_t)
        r = risk_fn(ep)
        if metric == "c_index":
            v = c_index(r, dataset, ep)
        elif metric == "brier":
            v = brier(r, dataset, ep)
        elif metric == "weighted_brier":
            v = weighted_brier(r, dataset, ep, G or km_censoring(dataset))
        elif metric == "auc":
            v = auc_td(r, dataset, ep, G or km_censoring(dataset))
        else:
            raise ValidationError(f"unknown metric {metric!r}")
        if v is not None:
            values.append(v)
    if not values:
        raise ValidationError("metric undefined at every grid point")
    return float(np.mean(values))


@dataclass
class MetricReport:
    """Per-point metric values plus interval averages and counts."""

    rows: list = field(default_factory=list)
    averages: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"points": self.rows, "averages": self.averages}

    def csv_rows(self):
        header = ["t", "delta_t", "c_index", "brier", "weighted_brier", "auc",
                  "n_comparable_pairs", "n_at_risk", "n_wbs_excluded",
                  "n_auc_excluded"]
        yield header
        for row in self.rows:
            yield [row[k] for k in header]


def build_report(risks_matrix, dataset: Dataset, eval_points,
                 wbs_thresholds: str = "paper") -> MetricReport:
    """Assemble the full report from a precomputed (n x P) risk matrix."""
    risks_matrix = np.atleast_2d(np.asarray(risks_matrix, dtype=float))
    G = km_censoring(dataset)
    T, delta = _arrays(dataset)
    report = MetricReport()
    for j, ep in enumerate(eval_points):
        ep = ep if isinstance(ep, EvalPoint) else EvalPoint(*ep)
        r = risks_matrix[:, j]
        j_sel = (T >= ep.t) & (T <= ep.t + ep.delta_t) & (delta == 1)
        pairs = int(((T[:, None] > T[None, :]) & j_sel[None, :]).sum())
        wbs, wbs_excl = _weighted_brier_detail(r, dataset, ep, G, wbs_thresholds)
        auc, auc_excl = _auc_detail(r, dataset, ep, G)
        report.rows.append({
            "t": ep.t,
            "delta_t": ep.delta_t,
            "c_index": c_index(r, dataset, ep),
            "brier": brier(r, dataset, ep),
            "weighted_brier": wbs,
            "auc": auc,
            "n_comparable_pairs": pairs,
            "n_at_risk": int((T >= ep.t).sum()),
            "n_wbs_excluded": wbs_excl,
            "n_auc_excluded": auc_excl,
        })
    for name in ("c_index", "brier", "weighted_brier", "auc"):
        vals = [row[name] for row in report.rows if row[name] is not None]
        report.averages[name] = float(np.mean(vals)) if vals else None
        report.averages[f"{name}_points_used"] = len(vals)
    return report
