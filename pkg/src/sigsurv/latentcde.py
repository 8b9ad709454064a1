"""Controlled-ResNet latent states and reverse-mode gradients.

The latent state follows dz = G(z) dx.  The estimator updates the state only
at observation times, z_k = z_{k-1} + G(z_{k-1}) (X_k - X_{k-1}, t_k -
t_{k-1}); the generative/diagnostic solver can refine each embedded segment
with Euler substeps.  Gradients are computed by unrolling the recursion and
back-propagating through it, batched over records with padding masks so the
per-step work is dense linear algebra.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .timeseries import Dataset, EmbeddedPath, SampledPath, SurvivalRecord

__all__ = [
    "AffineField",
    "PolynomialScalarField",
    "NeuralField",
    "LatentTrajectory",
    "resnet_step",
    "solve_controlled",
    "ncde_states",
    "NCDEBatch",
    "bptt_gradients",
    "standardize_fit",
    "standardize_apply",
]

OVERFLOW_GUARD = 1e12


class AffineField:
    """G(z)[:, j] = A[:, j, :] @ z + b[:, j]; exact linear dynamics."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.A.ndim != 3 or self.b.shape != self.A.shape[:2]:
            raise ValidationError("affine field needs A of shape (p, d, p) and b of shape (p, d)")
        self.p, self.d = self.b.shape

    def evaluate(self, z):
        z = np.asarray(z, dtype=float)
        return np.einsum("pdq,q->pd", self.A, z) + self.b


class PolynomialScalarField:
    """Scalar latent (p = 1) with one univariate polynomial per channel.

    Coefficients are ascending (numpy polynomial convention).
    """

    def __init__(self, channel_coeffs):
        self.channel_coeffs = [np.asarray(c, dtype=float).ravel() for c in channel_coeffs]
        self.p, self.d = 1, len(self.channel_coeffs)

    def evaluate(self, z):
        h = float(np.asarray(z).ravel()[0])
        row = [np.polynomial.polynomial.polyval(h, c) for c in self.channel_coeffs]
        return np.asarray(row, dtype=float)[None, :]

    def derivative_sup(self, radius, n_grid=1000):
        """max |G_j'(h)| over |h| <= radius (Lipschitz estimate on a range)."""
        grid = np.linspace(-radius, radius, n_grid)
        best = 0.0
        for c in self.channel_coeffs:
            dc = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)
            best = max(best, float(np.max(np.abs(np.polynomial.polynomial.polyval(grid, dc)))))
        return best


class NeuralField:
    """Feed-forward vector field z -> G(z) in R^{p x d}.

    Two hidden layers of width ``hidden`` with tanh on every node including
    the output layer, which keeps the field (and the latent dynamics on
    standardized data) bounded.
    """

    def __init__(self, p, d, hidden=128, seed=0):
        self.p, self.d, self.hidden = p, d, hidden
        rng = np.random.default_rng(seed)
        sizes = [(p, hidden), (hidden, hidden), (hidden, p * d)]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in sizes:
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    def param_shapes(self):
        shapes = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            shapes.append((f"W{i}", w.shape))
            shapes.append((f"b{i}", b.shape))
        return shapes

    def get_params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, params):
        for i in range(3):
            self.weights[i] = np.asarray(params[f"W{i+1}"], dtype=float)
            self.biases[i] = np.asarray(params[f"b{i+1}"], dtype=float)

    def forward_batch(self, Z):
        """Field values for a batch of latents; returns (G, cache) with G of
        shape (B, p, d)."""
        h1 = np.tanh(Z @ self.weights[0] + self.biases[0])
        h2 = np.tanh(h1 @ self.weights[1] + self.biases[1])
        o = np.tanh(h2 @ self.weights[2] + self.biases[2])
        G = o.reshape(Z.shape[0], self.p, self.d)
        return G, (Z, h1, h2, o)

    def backward_batch(self, cache, g_G, grads):
        """Accumulate parameter gradients; returns gradient w.r.t. Z."""
        Z, h1, h2, o = cache
        g_o = g_G.reshape(Z.shape[0], -1) * (1.0 - o**2)
        grads["W3"] += h2.T @ g_o
        grads["b3"] += g_o.sum(axis=0)
        g_h2 = (g_o @ self.weights[2].T) * (1.0 - h2**2)
        grads["W2"] += h1.T @ g_h2
        grads["b2"] += g_h2.sum(axis=0)
        g_h1 = (g_h2 @ self.weights[1].T) * (1.0 - h1**2)
        grads["W1"] += Z.T @ g_h1
        grads["b1"] += g_h1.sum(axis=0)
        return g_h1 @ self.weights[0].T

    def evaluate(self, z):
        G, _ = self.forward_batch(np.asarray(z, dtype=float).reshape(1, -1))
        return G[0]

    def zero_grads(self):
        return {name: np.zeros(shape) for name, shape in self.param_shapes()}

    def to_json(self):
        flat = np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])
        manifest = {
            "p": self.p, "d": self.d, "hidden": self.hidden,
            "layout": [["weights", [list(w.shape) for w in self.weights]],
                       ["biases", [list(b.shape) for b in self.biases]]],
        }
        return {"manifest": manifest, "values": flat.tolist()}

    @classmethod
    def from_json(cls, blob):
        man = blob["manifest"]
        field = cls(man["p"], man["d"], hidden=man["hidden"], seed=0)
        flat = np.asarray(blob["values"], dtype=float)
        pos = 0
        for i, shape in enumerate(man["layout"][0][1]):
            size = int(np.prod(shape))
            field.weights[i] = flat[pos:pos + size].reshape(shape)
            pos += size
        for i, shape in enumerate(man["layout"][1][1]):
            size = int(np.prod(shape))
            field.biases[i] = flat[pos:pos + size].reshape(shape)
            pos += size
        return field


@dataclass(frozen=True)
class LatentTrajectory:
    times: np.ndarray
    values: np.ndarray  # (len(times), p)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != times.shape[0]:
            raise ValidationError("trajectory length mismatch")
        if not np.all(np.isfinite(values)):
            raise ValidationError("non-finite latent values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


def resnet_step(z, field, dx):
    """One controlled-ResNet update z + G(z) dx."""
    z = np.asarray(z, dtype=float)
    dx = np.asarray(dx, dtype=float)
    G = field.evaluate(z)
    if G.shape != (z.shape[0], dx.shape[0]):
        raise ValidationError(
            f"field output {G.shape} incompatible with latent {z.shape} and increment {dx.shape}"
        )
    out = z + G @ dx
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite latent after update")
    return out


def solve_controlled(z0, field, path: EmbeddedPath, substeps: int = 1) -> LatentTrajectory:
    """Euler solve of dz = G(z) dx over the embedded path's segments.

    substeps > 1 refines each segment; the estimator itself uses one step per
    observation increment.  Blows up loudly past the overflow guard.
    """
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    z = np.asarray(z0, dtype=float).copy()
    times = [float(path.start[-1])]
    values = [z.copy()]
    t = times[0]
    for inc, _ in zip(path.increments, path.seg_times):
        step = inc / substeps
        for _ in range(substeps):
            z = z + field.evaluate(z) @ step
            t += step[-1]
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > OVERFLOW_GUARD:
                raise NumericalError("latent state diverged", time=t)
        times.append(t)
        values.append(z.copy())
    return LatentTrajectory(times=np.asarray(times), values=np.asarray(values))


def ncde_states(field, path: SampledPath):
    """Latent states at the path's observation times (z(t_0) = 0).

    The state updates once per observation with the combined
    (feature, time) increment; between observations it is constant.
    """
    X = path.values
    t = path.times
    z = np.zeros(field.p)
    states = [z.copy()]
    for k in range(1, t.size):
        dx = np.concatenate([X[k] - X[k - 1], [t[k] - t[k - 1]]])
        z = resnet_step(z, field, dx)
        if np.max(np.abs(z)) > OVERFLOW_GUARD:
            raise NumericalError("latent state diverged", time=t[k])
        states.append(z.copy())
    return np.asarray(states)


class NCDEBatch:
    """Padded arrays for a batch of records, reused across epochs."""

    def __init__(self, records):
        self.records = list(records)
        B = len(self.records)
        if B == 0:
            raise ValidationError("batch is empty")
        d = self.records[0].path.d_raw + 1
        K = max(r.path.n_obs for r in self.records)
        self.dX = np.zeros((B, max(K - 1, 1), d))
        self.step_mask = np.zeros((B, max(K - 1, 1)))
        self.dt = np.zeros((B, K))
        self.last_idx = np.zeros(B, dtype=int)
        self.delta = np.array([r.event_indicator for r in self.records], dtype=float)
        self.statics = np.asarray([r.statics for r in self.records], dtype=float)
        if self.statics.size == 0:
            self.statics = self.statics.reshape(B, 0)
        self.K = K
        for i, rec in enumerate(self.records):
            t, X = rec.path.times, rec.path.values
            n = t.size
            for k in range(1, n):
                self.dX[i, k - 1, :-1] = X[k] - X[k - 1]
                self.dX[i, k - 1, -1] = t[k] - t[k - 1]
                self.step_mask[i, k - 1] = 1.0
                self.dt[i, k - 1] = t[k] - t[k - 1]
            self.dt[i, n - 1] = rec.event_time - t[n - 1]
            self.last_idx[i] = n - 1


def _forward_batch(field, batch: NCDEBatch):
    B, K, p = len(batch.records), batch.K, field.p
    Z = np.zeros((B, K, p))
    caches = []
    for k in range(1, K):
        G, cache = field.forward_batch(Z[:, k - 1])
        upd = np.einsum("bpd,bd->bp", G, batch.dX[:, k - 1])
        Z[:, k] = Z[:, k - 1] + batch.step_mask[:, k - 1, None] * upd
        caches.append(cache)
    if np.max(np.abs(Z)) > OVERFLOW_GUARD or not np.all(np.isfinite(Z)):
        raise NumericalError("latent state diverged in batch forward")
    return Z, caches


def _nll_terms(Z, batch, alpha, beta):
    logb = batch.statics @ beta if beta.size else np.zeros(len(batch.records))
    eta = Z @ alpha + logb[:, None]  # (B, K)
    state_mask = np.arange(batch.K)[None, :] <= batch.last_idx[:, None]
    if np.max(np.abs(np.where(state_mask, eta, 0.0))) > 50.0:
        raise NumericalError("log-intensity overflow in batch")
    lam = np.exp(np.where(state_mask, eta, 0.0))
    integral = (lam * batch.dt).sum(axis=1)
    rows = np.arange(len(batch.records))
    event_eta = eta[rows, batch.last_idx]
    loss = integral - batch.delta * event_eta
    return loss, lam, eta, logb


def bptt_gradients(field, alpha, beta, records, loss="nll"):
    """Loss value and gradients through the unrolled latent recursion.

    ``loss='nll'`` gives the per-record counting-process negative
    log-likelihood averaged over the batch; ``loss='terminal_sq'`` is the
    mean of 0.5 ||z_T||^2 (used by the gradient-check tests).
    Returns (loss_value, grads) with grads holding W1..b3, alpha, beta.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    batch = records if isinstance(records, NCDEBatch) else NCDEBatch(records)
    B, K = len(batch.records), batch.K
    Z, caches = _forward_batch(field, batch)
    grads = field.zero_grads()
    rows = np.arange(B)

    if loss == "nll":
        per_rec, lam, eta, _ = _nll_terms(Z, batch, alpha, beta)
        value = per_rec.mean()
        # direct adjoints d loss / d z_k (before chaining through steps)
        w = lam * batch.dt  # (B, K)
        direct = w[:, :, None] * alpha[None, None, :]
        direct[rows, batch.last_idx] -= batch.delta[:, None] * alpha[None, :]
        g_alpha = np.einsum("bk,bkp->p", w, Z) - np.einsum(
            "b,bp->p", batch.delta, Z[rows, batch.last_idx]
        )
        g_beta = ((w.sum(axis=1) - batch.delta)[:, None] * batch.statics).sum(axis=0) \
            if beta.size else np.zeros(0)
    elif loss == "terminal_sq":
        z_last = Z[rows, batch.last_idx]
        value = 0.5 * (z_last**2).sum(axis=1).mean()
        direct = np.zeros_like(Z)
        direct[rows, batch.last_idx] = z_last
        g_alpha = np.zeros_like(alpha)
        g_beta = np.zeros_like(beta)
    else:
        raise ValidationError(f"unknown loss {loss!r}")

    carry = direct[:, K - 1].copy()
    for k in range(K - 1, 0, -1):
        g_upd = batch.step_mask[:, k - 1, None] * carry
        g_G = np.einsum("bp,bd->bpd", g_upd, batch.dX[:, k - 1])
        g_z = field.backward_batch(caches[k - 1], g_G, grads)
        carry = carry + g_z + direct[:, k - 1]

    if not np.isfinite(value):
        raise NumericalError("non-finite loss")
    for name in grads:
        grads[name] /= B
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError("non-finite gradient")
    grads["alpha"] = g_alpha / B
    grads["beta"] = g_beta / B
    return float(value), grads


def standardize_fit(dataset: Dataset):
    """Per-channel mean and standard deviation pooled over all observations."""
    stacked = np.concatenate([r.path.values for r in dataset.records], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def standardize_apply(dataset: Dataset, mean, std) -> Dataset:
    records = []
    for r in dataset.records:
        path = SampledPath(times=r.path.times, values=(r.path.values - mean) / std)
        records.append(SurvivalRecord(
            path=path, statics=r.statics, event_time=r.event_time,
            event_indicator=r.event_indicator, record_id=r.record_id,
        ))
    return Dataset(records=records, horizon=dataset.horizon,
                   feature_names=dataset.feature_names,
                   static_names=dataset.static_names)
