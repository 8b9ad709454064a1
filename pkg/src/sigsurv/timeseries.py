"""Data model for irregularly sampled paths and survival records.

A sampled path stores raw feature observations on its own grid.  Before any
signature or latent-state computation the path is embedded into a
time-augmented piecewise path: the time channel is appended as the *last*
coordinate and feature values are filled forward between observations (no
look-ahead).  All types are immutable after construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "SampledPath",
    "EmbeddedPath",
    "SurvivalRecord",
    "Dataset",
    "embed_fill_forward",
    "embed_linear",
    "restrict",
    "total_variation",
    "mesh",
    "observe_on_grid",
    "load_dataset",
    "save_dataset",
]


@dataclass(frozen=True)
class SampledPath:
    """Multivariate series observed at strictly increasing times in [0, tau].

    ``values`` has one row per observation time; the time channel is *not*
    stored here (it is appended during embedding).
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != times.shape[0]:
            raise ValidationError(
                f"values has {values.shape[0]} rows for {times.shape[0]} times"
            )
        if times.size == 0:
            raise ValidationError("path needs at least one observation")
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
            raise ValidationError("non-finite entries in path")
        if times[0] != 0.0:
            raise ValidationError("times must start at 0 (normalize on load)")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValidationError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def d_raw(self) -> int:
        return self.values.shape[1]

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class EmbeddedPath:
    """Piecewise-linear path in R^d with the time channel last.

    Stored as a start point plus ordered segment increments.  The
    fill-forward embedding alternates time-advance segments (only the last
    coordinate moves) with zero-duration feature jumps; the linear embedding
    used by the diagnostics moves all coordinates at once.  ``seg_times``
    caches each segment's start time for fast lookup.
    """

    start: np.ndarray
    increments: np.ndarray
    t_end: float
    seg_times: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[1] != start.shape[0]:
            raise ValidationError("increment shape does not match start point")
        ends = start[-1] + np.cumsum(inc[:, -1]) if len(inc) else np.empty(0)
        starts = np.concatenate([[start[-1]], ends[:-1]]) if len(inc) else np.empty(0)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "seg_times", starts)

    @property
    def d(self) -> int:
        return self.start.shape[0]

    def one_variation(self, t: float | None = None) -> float:
        """Exact 1-variation of the embedded path (sum of segment norms)."""
        if t is None:
            return float(np.linalg.norm(self.increments, axis=1).sum())
        total = 0.0
        for inc, s0 in zip(self.increments, self.seg_times):
            dur = inc[-1]
            if dur == 0.0:
                if s0 <= t:
                    total += float(np.linalg.norm(inc))
                continue
            if s0 >= t:
                break
            frac = min(1.0, (t - s0) / dur)
            total += frac * float(np.linalg.norm(inc))
        return total

    def value_at(self, t: float) -> np.ndarray:
        """Path value at time t (right limit at jump times)."""
        if t < self.start[-1] - 1e-12 or t > self.t_end + 1e-12:
            raise ValidationError(f"time {t} outside [{self.start[-1]}, {self.t_end}]")
        point = self.start.copy()
        for inc, s0 in zip(self.increments, self.seg_times):
            dur = inc[-1]
            if dur == 0.0:
                if s0 <= t:
                    point += inc
                continue
            if s0 >= t:
                break
            frac = min(1.0, (t - s0) / dur)
            point += frac * inc
        return point


def embed_fill_forward(path: SampledPath, horizon: float) -> EmbeddedPath:
    """Time-augmented fill-forward embedding of a sampled path.

    Features stay constant between observations while the appended time
    channel advances linearly; each new observation enters as a zero-duration
    jump.  The path is extended to ``horizon`` by holding the last value.
    """
    t = path.times
    if horizon < t[-1] - 1e-12:
        raise ValidationError(f"horizon {horizon} before last observation {t[-1]}")
    d = path.d_raw + 1
    segs = []
    for k in range(1, path.n_obs):
        adv = np.zeros(d)
        adv[-1] = t[k] - t[k - 1]
        segs.append(adv)
        jump = np.zeros(d)
        jump[:-1] = path.values[k] - path.values[k - 1]
        segs.append(jump)
    if horizon > t[-1]:
        adv = np.zeros(d)
        adv[-1] = horizon - t[-1]
        segs.append(adv)
    start = np.concatenate([path.values[0], [t[0]]])
    inc = np.vstack(segs) if segs else np.zeros((0, d))
    return EmbeddedPath(start=start, increments=inc, t_end=float(horizon))


def embed_linear(path: SampledPath) -> EmbeddedPath:
    """Time-augmented piecewise-linear embedding (diagnostics reference).

    Used when a densely sampled path stands in for its continuous
    counterpart; chord segments are second-order accurate in the mesh where
    fill-forward is only first-order.
    """
    t = path.times
    d = path.d_raw + 1
    inc = np.zeros((max(path.n_obs - 1, 0), d))
    if path.n_obs > 1:
        inc[:, :-1] = np.diff(path.values, axis=0)
        inc[:, -1] = np.diff(t)
    start = np.concatenate([path.values[0], [t[0]]])
    return EmbeddedPath(start=start, increments=inc, t_end=float(t[-1]))


def restrict(path: SampledPath, t: float) -> SampledPath:
    """Keep observations with times <= t (at least the initial point)."""
    if t < 0:
        raise ValidationError("restriction time must be nonnegative")
    keep = max(1, int(np.searchsorted(path.times, t, side="right")))
    return SampledPath(times=path.times[:keep], values=path.values[:keep])


def total_variation(path: SampledPath) -> float:
    """Chord-sum variation of the time-augmented sample points.

    This is the tightest 1-variation estimate for the underlying continuous
    path and feeds Lipschitz-constant estimates for the bias bounds.
    """
    if path.n_obs < 2:
        return 0.0
    dx = np.diff(path.values, axis=0)
    dt = np.diff(path.times)
    return float(np.sqrt((dx**2).sum(axis=1) + dt**2).sum())


def mesh(path: SampledPath) -> float:
    """Largest gap between consecutive observation times."""
    if path.n_obs < 2:
        raise ValidationError("mesh needs at least two observations")
    return float(np.max(np.diff(path.times)))


def observe_on_grid(dense: SampledPath, keep_every: int, stop_at: float) -> SampledPath:
    """Subsample a dense path, always retaining time 0, dropping rows after stop_at."""
    if keep_every < 1:
        raise ValidationError("keep_every must be >= 1")
    idx = np.arange(0, dense.n_obs, keep_every)
    mask = dense.times[idx] <= stop_at + 1e-12
    idx = idx[mask]
    if idx.size == 0:
        idx = np.array([0])
    return SampledPath(times=dense.times[idx], values=dense.values[idx])


@dataclass(frozen=True)
class SurvivalRecord:
    """One individual: observed path, static features, event time and indicator."""

    path: SampledPath
    statics: np.ndarray
    event_time: float
    event_indicator: int
    record_id: str = "0"

    def __post_init__(self):
        statics = np.asarray(self.statics, dtype=float).reshape(-1)
        if not np.all(np.isfinite(statics)):
            raise ValidationError(f"non-finite statics for record {self.record_id}")
        if self.event_indicator not in (0, 1):
            raise ValidationError(f"event indicator must be 0 or 1, got {self.event_indicator}")
        if not (self.event_time > 0 and math.isfinite(self.event_time)):
            raise ValidationError(f"event time must be positive and finite for record {self.record_id}")
        if self.path.times[-1] > self.event_time + 1e-9:
            raise ValidationError(
                f"observation after event for record {self.record_id}"
            )
        object.__setattr__(self, "statics", statics)

    def at_risk(self, t: float) -> int:
        return 1 if t <= self.event_time else 0

    def counting_process(self, t: float) -> int:
        return 1 if (self.event_indicator == 1 and self.event_time <= t) else 0


@dataclass(frozen=True)
class Dataset:
    """Collection of survival records sharing a schema and horizon."""

    records: tuple
    horizon: float
    feature_names: tuple = ()
    static_names: tuple = ()

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise ValidationError("dataset is empty")
        d = records[0].path.d_raw
        s = records[0].statics.shape[0]
        for r in records:
            if r.path.d_raw != d:
                raise ValidationError("records disagree on feature dimension")
            if r.statics.shape[0] != s:
                raise ValidationError("records disagree on static dimension")
            if r.event_time > self.horizon + 1e-9:
                raise ValidationError(f"event time {r.event_time} beyond horizon {self.horizon}")
        object.__setattr__(self, "records", records)
        fn = tuple(self.feature_names) or tuple(f"f{j+1}" for j in range(d))
        sn = tuple(self.static_names) or tuple(f"stat{j+1}" for j in range(s))
        object.__setattr__(self, "feature_names", fn)
        object.__setattr__(self, "static_names", sn)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def d_raw(self) -> int:
        return self.records[0].path.d_raw

    @property
    def n_statics(self) -> int:
        return self.records[0].statics.shape[0]

    def event_times(self, events_only: bool = False) -> np.ndarray:
        ts = [r.event_time for r in self.records
              if not events_only or r.event_indicator == 1]
        return np.asarray(ts, dtype=float)

    def subset(self, indices) -> "Dataset":
        recs = [self.records[i] for i in indices]
        return Dataset(records=recs, horizon=self.horizon,
                       feature_names=self.feature_names,
                       static_names=self.static_names)

    def split(self, test_fraction: float, seed: int):
        """Seeded shuffle split; returns (train, test, test_indices)."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(self.n)
        n_test = max(1, int(round(self.n * test_fraction)))
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        return self.subset(train_idx), self.subset(test_idx), test_idx


def _read_rows(path, expected_lead):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for i, name in enumerate(expected_lead):
            if i >= len(header) or header[i] != name:
                raise ValidationError(
                    f"{path}: expected leading columns {expected_lead}, got {header[:len(expected_lead)]}"
                )
        rows = list(reader)
    return header, rows


def _parse_float(raw, where):
    try:
        v = float(raw)
    except ValueError:
        raise ValidationError(f"{where}: cannot parse value {raw!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{where}: non-finite value {raw!r}")
    return v


def load_dataset(longitudinal_file, records_file) -> Dataset:
    """Load the two-file dataset format.

    Longitudinal header ``id,time,<features...>``; records header
    ``id,event_time,event,<statics...>``.  Row order is irrelevant.  Each
    record's clock is rebased so its first observation sits at time 0 (the
    same shift is applied to its event time).
    """
    lon_header, lon_rows = _read_rows(longitudinal_file, ["id", "time"])
    rec_header, rec_rows = _read_rows(records_file, ["id", "event_time", "event"])
    feature_names = lon_header[2:]
    static_names = rec_header[3:]

    series: dict[str, list] = {}
    for row in lon_rows:
        if len(row) != len(lon_header):
            raise ValidationError(f"{longitudinal_file}: ragged row {row}")
        rid = row[0]
        t = _parse_float(row[1], f"{longitudinal_file} id={rid}")
        vals = [_parse_float(v, f"{longitudinal_file} id={rid}") for v in row[2:]]
        series.setdefault(rid, []).append((t, vals))

    records = []
    seen = set()
    for row in rec_rows:
        if len(row) != len(rec_header):
            raise ValidationError(f"{records_file}: ragged row {row}")
        rid = row[0]
        if rid in seen:
            raise ValidationError(f"{records_file}: duplicate id {rid}")
        seen.add(rid)
        if rid not in series:
            raise ValidationError(f"id {rid} has no longitudinal rows")
        event_time = _parse_float(row[1], f"{records_file} id={rid}")
        raw_event = row[2].strip()
        if raw_event not in ("0", "1"):
            raise ValidationError(f"{records_file} id={rid}: event must be 0 or 1")
        statics = [_parse_float(v, f"{records_file} id={rid}") for v in row[3:]]

        pts = sorted(series[rid], key=lambda p: p[0])
        times = np.array([p[0] for p in pts])
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValidationError(f"id {rid}: non-monotone observation times")
        values = np.array([p[1] for p in pts])
        shift = times[0]
        times = times - shift
        event_time = event_time - shift
        if times[-1] > event_time + 1e-9:
            raise ValidationError(f"id {rid}: observation after event")
        records.append(SurvivalRecord(
            path=SampledPath(times=times, values=values),
            statics=np.asarray(statics),
            event_time=event_time,
            event_indicator=int(raw_event),
            record_id=rid,
        ))
    extra = set(series) - seen
    if extra:
        raise ValidationError(f"longitudinal ids without record rows: {sorted(extra)[:5]}")
    records.sort(key=lambda r: r.record_id)
    horizon = max(r.event_time for r in records)
    return Dataset(records=records, horizon=horizon,
                   feature_names=feature_names, static_names=static_names)


def save_dataset(dataset: Dataset, longitudinal_file, records_file) -> None:
    """Write the two-file format with full-precision floats (round-trip safe)."""
    with open(longitudinal_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", *dataset.feature_names])
        for rec in dataset.records:
            for t, row in zip(rec.path.times, rec.path.values):
                writer.writerow([rec.record_id, repr(float(t)),
                                 *[repr(float(v)) for v in row]])
    with open(records_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "event_time", "event", *dataset.static_names])
        for rec in dataset.records:
            writer.writerow([rec.record_id, repr(float(rec.event_time)),
                             rec.event_indicator,
                             *[repr(float(v)) for v in rec.statics]])
