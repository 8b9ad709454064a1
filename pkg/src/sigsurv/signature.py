"""Truncated signature algebra over words on the alphabet {1..d}.

Coefficients are stored flat, grouped by word length then lexicographically
within each level (letter 1 first).  The level-0 coefficient is implicitly 1
and never stored.  Appending a letter ``l`` to a word of within-level rank
``r`` gives rank ``r*d + (l-1)``, so time-channel extensions (letter d
repeated m times) touch the strided slice ``[d**m - 1 :: d**m]`` of each
level block; that structure is what makes streaming evaluation cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .timeseries import EmbeddedPath

__all__ = [
    "MAX_DEPTH",
    "Word",
    "SigVector",
    "sig_dim",
    "word_index",
    "index_word",
    "word_to_string",
    "word_from_string",
    "time_word_indices",
    "segment_signature",
    "chen_concat",
    "path_signature",
    "stream_signatures",
    "time_extend_levels",
    "levels_of",
    "flatten_levels",
]

# Cross-validated depths in practice are {2, 3}; deeper signatures are
# numerically unstable at these scales, so the API refuses them outright.
MAX_DEPTH = 6


def _check_dims(d: int, N: int) -> None:
    if d < 1 or N < 1:
        raise ValidationError(f"need d >= 1 and N >= 1, got d={d}, N={N}")
    if N > MAX_DEPTH:
        raise ValidationError(f"depth {N} exceeds cap {MAX_DEPTH}")


def sig_dim(d: int, N: int) -> int:
    """Number of stored coefficients: sum of d**k for k = 1..N."""
    _check_dims(d, N)
    return sum(d**k for k in range(1, N + 1))


def level_offsets(d: int, N: int) -> list[int]:
    """Start offset of each level block (index 0 unused, levels 1..N)."""
    offs = [0, 0]
    for k in range(1, N):
        offs.append(offs[-1] + d**k)
    return offs


@dataclass(frozen=True)
class Word:
    """Nonempty letter sequence over {1..d} indexing one coefficient."""

    letters: tuple

    def __post_init__(self):
        letters = tuple(int(l) for l in self.letters)
        if not letters:
            raise ValidationError("word must be nonempty")
        object.__setattr__(self, "letters", letters)

    def __len__(self):
        return len(self.letters)


def word_index(word, d: int, N: int) -> int:
    """Zero-based flat index of a word (level offset plus base-d rank)."""
    letters = word.letters if isinstance(word, Word) else tuple(word)
    _check_dims(d, N)
    k = len(letters)
    if k == 0 or k > N:
        raise ValidationError(f"word length {k} outside 1..{N}")
    rank = 0
    for l in letters:
        if not 1 <= l <= d:
            raise ValidationError(f"letter {l} outside alphabet 1..{d}")
        rank = rank * d + (l - 1)
    return level_offsets(d, N)[k] + rank


def index_word(index: int, d: int, N: int) -> tuple:
    """Inverse of :func:`word_index`."""
    _check_dims(d, N)
    if not 0 <= index < sig_dim(d, N):
        raise ValidationError(f"index {index} outside signature of dim {sig_dim(d, N)}")
    offs = level_offsets(d, N)
    k = 1
    while k < N and index >= offs[k] + d**k:
        k += 1
    rank = index - offs[k]
    letters = []
    for _ in range(k):
        letters.append(rank % d + 1)
        rank //= d
    return tuple(reversed(letters))


def word_to_string(letters) -> str:
    return ".".join(str(int(l)) for l in letters)


def word_from_string(s: str) -> tuple:
    return tuple(int(tok) for tok in s.split("."))


def time_word_indices(d: int, N: int) -> np.ndarray:
    """Indices of the words (d,), (d,d), ..., up to length N (time-only words)."""
    return np.array([word_index((d,) * k, d, N) for k in range(1, N + 1)])


@dataclass(frozen=True)
class SigVector:
    """Truncated signature coefficients, flat layout described above."""

    d: int
    N: int
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (sig_dim(self.d, self.N),):
            raise ValidationError(
                f"expected {sig_dim(self.d, self.N)} coefficients, got {coeffs.shape}"
            )
        object.__setattr__(self, "coeffs", coeffs)

    def level(self, k: int) -> np.ndarray:
        off = level_offsets(self.d, self.N)[k]
        return self.coeffs[off:off + self.d**k]

    def __getitem__(self, word):
        return float(self.coeffs[word_index(word, self.d, self.N)])


def levels_of(sig: SigVector) -> list:
    """Level views [1.0, level1, ..., levelN] (level 0 is the scalar 1)."""
    return [1.0] + [sig.level(k) for k in range(1, sig.N + 1)]


def flatten_levels(levels, d: int, N: int) -> SigVector:
    return SigVector(d=d, N=N, coeffs=np.concatenate([np.ravel(lv) for lv in levels[1:]]))


def _zero_levels(d: int, N: int) -> list:
    return [1.0] + [np.zeros(d**k) for k in range(1, N + 1)]


def _exp_levels(increment: np.ndarray, N: int) -> list:
    """Tensor exponential of a single linear segment: level k = inc^(x)k / k!."""
    inc = np.asarray(increment, dtype=float)
    levels = [1.0, inc.copy()]
    for k in range(2, N + 1):
        levels.append(np.kron(levels[-1], inc) / k)
    return levels


def segment_signature(increment, N: int) -> SigVector:
    """Signature of a straight segment with the given increment."""
    inc = np.asarray(increment, dtype=float)
    _check_dims(inc.shape[0], N)
    if not np.all(np.isfinite(inc)):
        raise ValidationError("non-finite segment increment")
    return flatten_levels(_exp_levels(inc, N), inc.shape[0], N)


def _chen_levels(a: list, b: list, N: int) -> list:
    """Truncated tensor product of two level lists (Chen's identity)."""
    out = [1.0]
    for k in range(1, N + 1):
        acc = a[k] + b[k]
        for j in range(1, k):
            acc = acc + np.kron(a[j], b[k - j])
        out.append(acc)
    return out


def chen_concat(a: SigVector, b: SigVector) -> SigVector:
    """Signature of the concatenated path from the signatures of its halves."""
    if (a.d, a.N) != (b.d, b.N):
        raise ValidationError(f"shape mismatch: ({a.d},{a.N}) vs ({b.d},{b.N})")
    return flatten_levels(_chen_levels(levels_of(a), levels_of(b), a.N), a.d, a.N)


def time_extend_levels(levels: list, delta, d: int, N: int) -> list:
    """Concatenate with a pure time-advance segment of length ``delta``.

    ``delta`` may be a scalar (level arrays of shape (d**k,)) or a 1-d array
    of B lags, in which case the result levels have shape (B, d**k) and give
    the signature extended by each lag separately.
    """
    delta = np.asarray(delta, dtype=float)
    pows = [np.ones_like(delta)]
    for m in range(1, N + 1):
        pows.append(pows[-1] * delta / m)
    out = [1.0]
    for k in range(1, N + 1):
        lv = np.zeros(delta.shape + (d**k,))
        for m in range(0, k + 1):
            base = np.asarray(levels[k - m], dtype=float).ravel()
            lv[..., d**m - 1::d**m] += np.multiply.outer(pows[m], base)
        out.append(lv)
    return out


def time_shift_indices(d: int, N: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs implementing the pure time extension as a sparse map.

    With Shat = [1, coefficients] (leading constant at index 0), the
    coefficient readout after extending by a lag ``delta`` satisfies

        alpha . S(t + delta) = sum_m delta^m/m! * Shat(t)[src_m] . alpha[dst_m]

    where (src_m, dst_m) is the m-th returned pair.  The same pairs drive the
    adjoint scatter used by likelihood gradients.
    """
    _check_dims(d, N)
    offs = level_offsets(d, N)
    out = []
    for m in range(0, N + 1):
        src, dst = [], []
        for j in range(0 if m else 1, N - m + 1):
            r = np.arange(d**j) if j else np.array([0])
            src.append((1 + offs[j] + r) if j else np.array([0]))
            dst.append(offs[j + m] + r * d**m + (d**m - 1))
        out.append((np.concatenate(src), np.concatenate(dst)))
    return out


def _is_time_only(inc: np.ndarray) -> bool:
    return bool(np.all(inc[:-1] == 0.0))


def _fold_segment(levels: list, inc: np.ndarray, d: int, N: int) -> list:
    if _is_time_only(inc):
        return time_extend_levels(levels, float(inc[-1]), d, N)
    return _chen_levels(levels, _exp_levels(inc, N), N)


def path_signature(p: EmbeddedPath, t: float, N: int) -> SigVector:
    """Signature of the embedded path restricted to [0, t].

    A partial final segment is scaled linearly; zero-duration jumps sitting
    exactly at t are included (the fill-forward path takes the new value at
    its observation time).
    """
    d = p.d
    _check_dims(d, N)
    t0 = float(p.start[-1])
    if t < t0 - 1e-12 or t > p.t_end + 1e-9:
        raise ValidationError(f"time {t} outside [{t0}, {p.t_end}]")
    levels = _zero_levels(d, N)
    for inc, s0 in zip(p.increments, p.seg_times):
        dur = inc[-1]
        if dur == 0.0:
            if s0 <= t + 1e-15:
                levels = _fold_segment(levels, inc, d, N)
            continue
        if s0 >= t - 1e-15:
            break
        frac = min(1.0, (t - s0) / dur)
        levels = _fold_segment(levels, frac * inc, d, N)
    return flatten_levels(levels, d, N)


def stream_signature_matrix(p: EmbeddedPath, eval_times, N: int) -> np.ndarray:
    """Signature coefficients at each ascending time, one row per time.

    Folds every segment once, so the cost is O(#segments * q * d) plus one
    partial time extension per evaluation time.
    """
    d = p.d
    _check_dims(d, N)
    times = np.asarray(eval_times, dtype=float)
    out = np.empty((times.size, sig_dim(d, N)))
    if times.size == 0:
        return out
    if np.any(np.diff(times) < 0):
        raise ValidationError("evaluation times must be ascending")
    if times[0] < p.start[-1] - 1e-12 or times[-1] > p.t_end + 1e-9:
        raise ValidationError("evaluation times outside path domain")

    levels = _zero_levels(d, N)
    segs = list(zip(p.increments, p.seg_times))
    si = 0
    for ti_idx, t in enumerate(times):
        while si < len(segs):
            inc, s0 = segs[si]
            dur = inc[-1]
            if dur == 0.0:
                if s0 <= t + 1e-15:
                    levels = _fold_segment(levels, inc, d, N)
                    si += 1
                    continue
                break
            if s0 + dur <= t + 1e-15:
                levels = _fold_segment(levels, inc, d, N)
                si += 1
                continue
            break
        # partial tail of the current segment, if t falls inside one
        chosen = levels
        if si < len(segs):
            inc, s0 = segs[si]
            dur = inc[-1]
            if dur > 0.0 and t > s0 + 1e-15:
                chosen = _fold_segment(levels, (t - s0) / dur * inc, d, N)
        out[ti_idx] = np.concatenate([np.ravel(lv) for lv in chosen[1:]])
    return out


def stream_signatures(p: EmbeddedPath, eval_times, N: int) -> list[SigVector]:
    """Signatures at each ascending evaluation time in one sweep.

    Equivalent to calling :func:`path_signature` pointwise; see
    :func:`stream_signature_matrix` for the cost model.
    """
    mat = stream_signature_matrix(p, eval_times, N)
    return [SigVector(d=p.d, N=N, coeffs=row) for row in mat]
