"""Seeded synthetic data generators.

Fractional Brownian drivers are sampled exactly via a Cholesky factor of
their covariance on the simulation grid (the grid is ~1000 points, so the
O(K^2) memory is cheap and the draw is exact).  Hitting-time datasets use
Euler discretization on the same grid; thinning generates events from a
known signature intensity against a scanned constant envelope.  Every
record draws from a child generator keyed by (seed, record index), so
datasets are reproducible regardless of how work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .intensity import CoxSigParams, effective_statics
from .signature import stream_signature_matrix
from .timeseries import (
    Dataset,
    SampledPath,
    SurvivalRecord,
    embed_fill_forward,
    observe_on_grid,
    restrict,
)

__all__ = [
    "OUConfig",
    "TumorConfig",
    "HiddenTruth",
    "fbm_paths",
    "fbm_cholesky",
    "ou_hitting_dataset",
    "tumor_growth_dataset",
    "simulate_from_intensity",
]


@dataclass(frozen=True)
class OUConfig:
    """Mean-reverting hitting-time dataset driven by fBm channels plus noise."""

    n: int = 500
    d_features: int = 4
    sigma: float = 1.0
    mu: float = 0.1
    omega: float = 0.1
    hurst: float = 0.6
    threshold: float = 2.5
    grid_points: int = 1000
    horizon: float = 10.0
    keep_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise ValidationError("Hurst parameter must lie in (0, 1)")
        if self.sigma < 0 or self.grid_points < 2:
            raise ValidationError("invalid OU configuration")


@dataclass(frozen=True)
class TumorConfig:
    """Four-compartment growth-inhibition dynamics driven by one fBm channel."""

    n: int = 500
    lambda0: float = 0.9
    lambda1: float = 0.7
    kappa1: float = 10.0
    kappa2: float = 0.15
    psi: float = 20.0
    initial: tuple = (0.8, 0.0, 0.0, 0.0)
    threshold: float = 1.7
    hurst: float = 0.6
    grid_points: int = 1000
    horizon: float = 10.0
    keep_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda0, self.lambda1, self.kappa1) <= 0 or self.psi < 1:
            raise ValidationError("invalid tumor configuration")
        if not 0.0 < self.hurst < 1.0:
            raise ValidationError("Hurst parameter must lie in (0, 1)")


@dataclass(frozen=True)
class HiddenTruth:
    """Ground-truth trajectories kept for diagnostics, never written to files."""

    grid: np.ndarray
    w: np.ndarray  # (n, K) latent trajectory driving the events
    extra: dict = field(default_factory=dict)


def fbm_cholesky(hurst: float, times: np.ndarray) -> np.ndarray:
    """Cholesky factor of the fBm covariance on strictly positive times."""
    t = np.asarray(times, dtype=float)
    cov = 0.5 * (
        t[:, None] ** (2 * hurst) + t[None, :] ** (2 * hurst)
        - np.abs(t[:, None] - t[None, :]) ** (2 * hurst)
    )
    jitter = 0.0
    scale = float(np.mean(np.diag(cov)))
    for _ in range(6):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(t.size))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10, 1e-12 * scale)
    raise NumericalError("fBm covariance not positive definite after jitter")


def fbm_paths(hurst, n_steps, horizon, channels, seed, n_paths=1):
    """Exact fractional Brownian paths on an equispaced grid, x(0) = 0."""
    times = np.linspace(0.0, horizon, n_steps)
    L = fbm_cholesky(hurst, times[1:])
    paths = []
    for i in range(n_paths):
        rng = np.random.default_rng([seed, i])
        z = rng.standard_normal(size=(channels, times.size - 1))
        vals = np.zeros((times.size, channels))
        vals[1:, :] = (z @ L.T).T
        paths.append(SampledPath(times=times, values=vals))
    return paths


def _terminal_records(grid, driver_values, w, threshold, horizon, keep_every):
    """Build records from latent trajectories: event at the first grid time
    with w >= threshold, terminal censoring otherwise."""
    records = []
    n = w.shape[0]
    for i in range(n):
        hits = np.nonzero(w[i] >= threshold)[0]
        if hits.size:
            T = float(grid[hits[0]])
            delta = 1
        else:
            T = float(horizon)
            delta = 0
        dense = SampledPath(times=grid, values=driver_values[i])
        obs = observe_on_grid(dense, keep_every, stop_at=T)
        records.append(SurvivalRecord(
            path=obs, statics=np.zeros(0), event_time=T, event_indicator=delta,
            record_id=f"{i:04d}",
        ))
    return records


def ou_hitting_dataset(cfg: OUConfig):
    """Simulate hitting times of a partially observed mean-reverting SDE.

    The latent trajectory follows dw = -omega (w - mu) dt + sum_j dx_j +
    sigma dB with w(0) = 0; only the fBm channels x are observed (restricted
    to [0, T]).  Returns (dataset, hidden truth).
    """
    grid = np.linspace(0.0, cfg.horizon, cfg.grid_points)
    dt = np.diff(grid)
    L = fbm_cholesky(cfg.hurst, grid[1:])
    n, K, c = cfg.n, cfg.grid_points, cfg.d_features

    driver = np.zeros((n, K, c))
    drive = np.zeros((n, K - 1))
    sqdt = np.sqrt(dt)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        z = rng.standard_normal(size=(c, K - 1))
        driver[i, 1:, :] = (z @ L.T).T
        dB = rng.standard_normal(K - 1) * sqdt
        # the channel sum runs over the time-augmented path: the last of the
        # d = d_features + 1 channels is time itself, contributing dt
        drive[i] = np.diff(driver[i], axis=0).sum(axis=1) + dt + cfg.sigma * dB
    w = np.zeros((n, K))
    wk = np.zeros(n)
    for k in range(K - 1):
        wk = wk - cfg.omega * (wk - cfg.mu) * dt[k] + drive[:, k]
        w[:, k + 1] = wk
    records = _terminal_records(grid, driver, w, cfg.threshold, cfg.horizon,
                                cfg.keep_every)
    dataset = Dataset(records=records, horizon=cfg.horizon)
    return dataset, HiddenTruth(grid=grid, w=w)


def tumor_growth_dataset(cfg: TumorConfig):
    """Simulate threshold crossings of the four-compartment growth model."""
    grid = np.linspace(0.0, cfg.horizon, cfg.grid_points)
    dt = np.diff(grid)
    L = fbm_cholesky(cfg.hurst, grid[1:])
    n, K = cfg.n, cfg.grid_points
    ratio = cfg.lambda0 / cfg.lambda1
    inv_psi = 1.0 / cfg.psi

    driver = np.zeros((n, K, 1))
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        z = rng.standard_normal(size=(1, K - 1))
        driver[i, 1:, :] = (z @ L.T).T
    states = np.zeros((n, K, 4))
    u = np.tile(np.asarray(cfg.initial, dtype=float), (n, 1))
    states[:, 0] = u
    for k in range(K - 1):
        x = driver[:, k, 0]
        wt = u.sum(axis=1)
        brake = (1.0 + np.abs(ratio * wt) ** cfg.psi) ** inv_psi
        kill = cfg.kappa2 * x * u[:, 0]
        du = np.column_stack([
            cfg.lambda0 * u[:, 0] / brake - kill,
            kill - cfg.kappa1 * u[:, 1],
            cfg.kappa1 * (u[:, 1] - u[:, 2]),
            cfg.kappa1 * (u[:, 2] - u[:, 3]),
        ])
        u = u + dt[k] * du
        if np.max(np.abs(u)) > 1e6 or not np.all(np.isfinite(u)):
            raise NumericalError("tumor state blow-up", time=grid[k + 1])
        states[:, k + 1] = u
    w = states.sum(axis=2)
    records = _terminal_records(grid, driver, w, cfg.threshold, cfg.horizon,
                                cfg.keep_every)
    dataset = Dataset(records=records, horizon=cfg.horizon)
    return dataset, HiddenTruth(grid=grid, w=w, extra={"states": states})


def _intensity_on_times(truth, record_like, times):
    """log intensity at ascending times over the fill-forwarded driver.

    ``truth`` is either signature-model parameters or any callable
    (path, statics, times) -> log intensities.
    """
    path, statics = record_like
    if callable(truth):
        return np.asarray(truth(path, statics, times), dtype=float)
    emb = embed_fill_forward(path, max(times[-1], path.times[-1]))
    sig = stream_signature_matrix(emb, times, truth.depth)
    w = np.concatenate([statics, path.values[0]]) if truth.plus_variant else statics
    bw = float(truth.beta @ w) if w.size else 0.0
    return sig @ truth.alpha + bw


def simulate_from_intensity(truth: CoxSigParams, driver_paths, horizon, seed,
                            statics=None):
    """One event time per driver path by thinning against a scanned envelope.

    The envelope is the max of the intensity on a dense scan grid times a
    1.2 safety factor; candidates are a Poisson stream at the envelope rate
    and the first accepted candidate is the event.  Records with no accepted
    candidate are terminally censored at the horizon.
    """
    n = len(driver_paths)
    if statics is None:
        if callable(truth):
            statics = np.zeros((n, 0))
        else:
            statics = np.zeros((n, truth.beta.size - (driver_paths[0].d_raw
                                                      if truth.plus_variant else 0)))
    statics = np.asarray(statics, dtype=float)
    if statics.ndim == 1:
        statics = statics[:, None]
    records = []
    for i, path in enumerate(driver_paths):
        rng = np.random.default_rng([seed, i])
        scan = np.unique(np.concatenate([
            path.times[path.times <= horizon],
            np.linspace(0.0, horizon, 257),
        ]))
        log_lam = _intensity_on_times(truth, (path, statics[i]), scan)
        if not np.all(np.isfinite(log_lam)):
            raise NumericalError("non-finite intensity during envelope scan",
                                 record_id=str(i))
        lam_max = float(np.exp(log_lam).max()) * 1.2
        # pre-draw the candidate Poisson stream, then accept the first hit
        t, candidates = 0.0, []
        while True:
            t += rng.exponential(1.0 / lam_max)
            if t > horizon:
                break
            candidates.append(t)
        T, delta = float(horizon), 0
        if candidates:
            cand = np.asarray(candidates)
            lam_c = np.exp(_intensity_on_times(truth, (path, statics[i]), cand))
            accept = rng.uniform(size=cand.size) * lam_max <= lam_c
            hits = np.nonzero(accept)[0]
            if hits.size:
                T, delta = float(cand[hits[0]]), 1
        records.append(SurvivalRecord(
            path=restrict(path, T), statics=statics[i], event_time=T,
            event_indicator=delta, record_id=f"{i:04d}",
        ))
    return Dataset(records=records, horizon=float(horizon))
