"""Shared test utilities: independent oracles and random-instance generators."""

import numpy as np

from sigsurv.timeseries import SampledPath, embed_fill_forward
from sigsurv.signature import sig_dim, word_index


def random_sampled_path(rng, d_raw, max_obs=8, horizon=1.0, scale=1.0):
    """Random irregular path starting at time 0."""
    k = int(rng.integers(2, max_obs + 1))
    times = np.sort(rng.uniform(0, horizon, size=k - 1))
    times = np.concatenate([[0.0], times])
    times = np.unique(times)
    values = rng.normal(scale=scale, size=(times.size, d_raw))
    return SampledPath(times=times, values=values)


def polyline_points(embedded, per_segment=64):
    """Dense polyline refinement of an embedded path (includes jump chords)."""
    pts = [embedded.start.copy()]
    cur = embedded.start.copy()
    for inc in embedded.increments:
        if np.allclose(inc, 0.0):
            continue
        for j in range(1, per_segment + 1):
            pts.append(cur + inc * (j / per_segment))
        cur = cur + inc
    return np.asarray(pts)


def iterated_integral_oracle(points, N):
    """Brute-force signature of a polyline via iterated Stieltjes sums.

    Trapezoid-in-the-integrand recursion over every word; O(h^2) accurate in
    the refinement of each straight piece, independent of the production
    Chen-based code path.
    """
    points = np.asarray(points, dtype=float)
    m, d = points.shape
    dx = np.diff(points, axis=0)
    coeffs = np.zeros(sig_dim(d, N))

    def build(prefix_running, depth):
        # prefix_running[j] = S_prefix at vertex j
        for letter in range(1, d + 1):
            mid = 0.5 * (prefix_running[:-1] + prefix_running[1:])
            increments = mid * dx[:, letter - 1]
            running = np.concatenate([[0.0], np.cumsum(increments)])
            yield letter, running

    def recurse(word, running, depth):
        coeffs[word_index(word, d, N)] = running[-1]
        if depth < N:
            for letter, nxt in build(running, depth):
                recurse(word + (letter,), nxt, depth + 1)

    ones = np.ones(m)
    for letter, running in build(ones, 0):
        recurse((letter,), running, 1)
    return coeffs


def finite_difference(fun, x0, eps=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        grad[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return grad


def fill_forward_embedding(rng, d_raw, **kw):
    p = random_sampled_path(rng, d_raw, **kw)
    horizon = p.times[-1] + float(rng.uniform(0, 0.3))
    return embed_fill_forward(p, horizon)
