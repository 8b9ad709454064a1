"""Tests for the truncated signature algebra."""

import math

import numpy as np
import pytest

from sigsurv.errors import ValidationError
from sigsurv.signature import (
    SigVector,
    chen_concat,
    index_word,
    path_signature,
    segment_signature,
    sig_dim,
    stream_signatures,
    time_word_indices,
    word_from_string,
    word_index,
    word_to_string,
)
from sigsurv.timeseries import SampledPath, embed_fill_forward

from helpers import (
    fill_forward_embedding,
    iterated_integral_oracle,
    polyline_points,
    random_sampled_path,
)


class TestDimensionsAndWords:
    def test_sig_dim(self):
        assert sig_dim(2, 2) == 6
        assert sig_dim(3, 3) == 39
        assert sig_dim(5, 2) == 30

    def test_depth_cap(self):
        with pytest.raises(ValidationError):
            sig_dim(2, 7)

    def test_word_index_enumeration_d2(self):
        assert word_index((1,), 2, 2) == 0
        assert word_index((2,), 2, 2) == 1
        assert word_index((1, 1), 2, 2) == 2
        assert word_index((2, 2), 2, 2) == 5

    def test_word_index_matches_sorted_enumeration_d3(self):
        # independent oracle: enumerate all words by (length, lexicographic)
        words = []
        for k in (1, 2):
            level = [(a,) for a in range(1, 4)] if k == 1 else [
                (a, b) for a in range(1, 4) for b in range(1, 4)
            ]
            words.extend(sorted(level))
        for i, w in enumerate(words):
            assert word_index(w, 3, 2) == i
        assert word_index((2, 3), 3, 2) == 8

    def test_index_word_bijection(self):
        for i in range(sig_dim(2, 3)):
            assert word_index(index_word(i, 2, 3), 2, 3) == i

    def test_word_string_round_trip(self):
        assert word_to_string((1, 3, 2)) == "1.3.2"
        assert word_from_string("1.3.2") == (1, 3, 2)

    def test_out_of_range_letters(self):
        with pytest.raises(ValidationError):
            word_index((0,), 2, 2)
        with pytest.raises(ValidationError):
            word_index((1, 1, 1), 2, 2)


class TestSegmentSignature:
    def test_zero_increment(self):
        s = segment_signature(np.zeros(3), 3)
        assert np.all(s.coeffs == 0.0)

    def test_straight_line_vs_quadrature_oracle(self):
        delta = np.array([1.0, 2.0])
        pts = np.linspace(0, 1, 257)[:, None] * delta[None, :]
        expected = iterated_integral_oracle(pts, 2)
        got = segment_signature(delta, 2)
        np.testing.assert_allclose(got.coeffs, expected, atol=1e-6)
        np.testing.assert_allclose(got.coeffs, [1, 2, 0.5, 1, 1, 2], atol=1e-12)

    def test_time_powers_1d(self):
        t = 0.7
        s = segment_signature(np.array([t]), 5)
        for k in range(1, 6):
            assert s[(1,) * k] == pytest.approx(t**k / math.factorial(k), abs=1e-15)


class TestChenConcat:
    def test_identity_element(self):
        rng = np.random.default_rng(0)
        a = segment_signature(rng.normal(size=3), 3)
        zero = SigVector(d=3, N=3, coeffs=np.zeros(sig_dim(3, 3)))
        np.testing.assert_allclose(chen_concat(a, zero).coeffs, a.coeffs, atol=1e-14)
        np.testing.assert_allclose(chen_concat(zero, a).coeffs, a.coeffs, atol=1e-14)

    def test_collinear_segments(self):
        delta = np.array([0.3, -1.2, 0.5])
        one = segment_signature(delta, 4)
        two = chen_concat(one, one)
        np.testing.assert_allclose(
            two.coeffs, segment_signature(2 * delta, 4).coeffs, atol=1e-12
        )

    def test_shape_mismatch(self):
        a = segment_signature(np.zeros(2), 2)
        b = segment_signature(np.zeros(3), 2)
        with pytest.raises(ValidationError):
            chen_concat(a, b)

    def test_random_split_matches_full_path(self):
        rng = np.random.default_rng(42)
        for d_raw, N in [(1, 3), (2, 2), (2, 4)]:
            for _ in range(10)            :
                emb = fill_forward_embedding(rng, d_raw)
                t_end = emb.t_end
                s = float(rng.uniform(0, t_end))
                left = path_signature(emb, s, N)
                # right part: signature of the path increments after s
                full = path_signature(emb, t_end, N)
                right = _signature_of_tail(emb, s, t_end, N)
                np.testing.assert_allclose(
                    chen_concat(left, right).coeffs, full.coeffs, atol=1e-10
                )


def _signature_of_tail(emb, s, t, N):
    """Signature of the path restricted to [s, t], built segment by segment."""
    d = emb.d
    acc = SigVector(d=d, N=N, coeffs=np.zeros(sig_dim(d, N)))
    for inc, s0 in zip(emb.increments, emb.seg_times):
        dur = inc[-1]
        if dur == 0.0:
            if s < s0 <= t or (s0 == t and s < t) or (s0 <= t and s0 > s):
                acc = chen_concat(acc, segment_signature(inc, N))
            continue
        s1 = s0 + dur
        lo, hi = max(s0, s), min(s1, t)
        if hi > lo:
            acc = chen_concat(acc, segment_signature(inc * (hi - lo) / dur, N))
    return acc


class TestPathSignature:
    def test_level_one_is_increment(self):
        rng = np.random.default_rng(7)
        p = random_sampled_path(rng, 3)
        emb = embed_fill_forward(p, p.times[-1])
        t = float(p.times[-1])
        sig = path_signature(emb, t, 2)
        inc = np.concatenate([p.values[-1] - p.values[0], [t]])
        np.testing.assert_allclose(sig.level(1), inc, atol=1e-12)

    def test_time_only_words(self):
        rng = np.random.default_rng(8)
        p = random_sampled_path(rng, 2)
        emb = embed_fill_forward(p, 2.0)
        d = 3
        for t in (0.5, 1.0, 2.0):
            sig = path_signature(emb, t, 5)
            for k in range(1, 6):
                assert sig[(d,) * k] == pytest.approx(
                    t**k / math.factorial(k), abs=1e-12
                )

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(9)
        p = random_sampled_path(rng, 2, max_obs=4)
        emb = embed_fill_forward(p, p.times[-1])
        pts = polyline_points(emb, per_segment=400)
        expected = iterated_integral_oracle(pts, 3)
        got = path_signature(emb, p.times[-1], 3)
        np.testing.assert_allclose(got.coeffs, expected, atol=2e-5)

    def test_out_of_range(self):
        p = SampledPath(times=[0.0, 1.0], values=[[0.0], [1.0]])
        emb = embed_fill_forward(p, 1.0)
        with pytest.raises(ValidationError):
            path_signature(emb, 1.5, 2)


class TestStreamSignatures:
    def test_single_time_matches_pointwise(self):
        rng = np.random.default_rng(11)
        emb = fill_forward_embedding(rng, 2)
        t = emb.t_end * 0.6
        [s] = stream_signatures(emb, [t], 3)
        np.testing.assert_allclose(
            s.coeffs, path_signature(emb, t, 3).coeffs, atol=1e-13
        )

    def test_many_times_match_pointwise(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            emb = fill_forward_embedding(rng, 2)
            times = np.sort(rng.uniform(0, emb.t_end, size=13))
            times = np.concatenate([[0.0], times, [emb.t_end]])
            sigs = stream_signatures(emb, times, 3)
            for t, s in zip(times, sigs):
                np.testing.assert_allclose(
                    s.coeffs, path_signature(emb, t, 3).coeffs, atol=1e-12
                )

    def test_segment_endpoints(self):
        rng = np.random.default_rng(13)
        p = random_sampled_path(rng, 1, max_obs=5)
        emb = embed_fill_forward(p, p.times[-1] + 0.2)
        times = np.concatenate([p.times, [emb.t_end]])
        sigs = stream_signatures(emb, times, 2)
        for t, s in zip(times, sigs):
            np.testing.assert_allclose(
                s.coeffs, path_signature(emb, t, 2).coeffs, atol=1e-12
            )

    def test_empty(self):
        rng = np.random.default_rng(14)
        emb = fill_forward_embedding(rng, 1)
        assert stream_signatures(emb, [], 2) == []

    def test_unordered_times(self):
        rng = np.random.default_rng(15)
        emb = fill_forward_embedding(rng, 1)
        with pytest.raises(ValidationError):
            stream_signatures(emb, [0.5 * emb.t_end, 0.1 * emb.t_end], 2)


class TestAlgebraicInvariants:
    def test_chen_identity_quantified(self):
        rng = np.random.default_rng(100)
        worst = 0.0
        for _ in range(30):
            d_raw = int(rng.integers(1, 3))
            N = int(rng.integers(2, 5))
            emb = fill_forward_embedding(rng, d_raw)
            s = float(rng.uniform(0, emb.t_end))
            lhs = chen_concat(
                path_signature(emb, s, N), _signature_of_tail(emb, s, emb.t_end, N)
            )
            rhs = path_signature(emb, emb.t_end, N)
            worst = max(worst, np.max(np.abs(lhs.coeffs - rhs.coeffs)))
        assert worst < 1e-10

    def test_factorial_decay(self):
        rng = np.random.default_rng(101)
        for _ in range(30):
            emb = fill_forward_embedding(rng, 2)
            t = float(rng.uniform(0.1, emb.t_end))
            sig = path_signature(emb, t, 4)
            v = emb.one_variation(t)
            for k in range(1, 5):
                assert np.linalg.norm(sig.level(k)) <= v**k / math.factorial(k) + 1e-12

    def test_shuffle_relation_depth2(self):
        rng = np.random.default_rng(102)
        for _ in range(10):
            emb = fill_forward_embedding(rng, 2)
            sig = path_signature(emb, emb.t_end, 2)
            d = 3
            for i in range(1, d + 1):
                for j in range(1, d + 1):
                    lhs = sig[(i,)] * sig[(j,)]
                    rhs = sig[(i, j)] + sig[(j, i)]
                    assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_translation_invariance(self):
        rng = np.random.default_rng(103)
        p = random_sampled_path(rng, 2)
        shifted = SampledPath(times=p.times, values=p.values + np.array([5.0, -3.0]))
        a = path_signature(embed_fill_forward(p, p.times[-1]), p.times[-1], 3)
        b = path_signature(embed_fill_forward(shifted, p.times[-1]), p.times[-1], 3)
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-12)

    def test_zero_increment_segment_is_neutral(self):
        rng = np.random.default_rng(104)
        emb = fill_forward_embedding(rng, 2)
        from sigsurv.timeseries import EmbeddedPath

        with_zero = EmbeddedPath(
            start=emb.start,
            increments=np.insert(emb.increments, 1, np.zeros(emb.d), axis=0),
            t_end=emb.t_end,
        )
        a = path_signature(emb, emb.t_end, 3)
        b = path_signature(with_zero, emb.t_end, 3)
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-14)


def test_time_word_indices():
    idx = time_word_indices(2, 3)
    assert [index_word(i, 2, 3) for i in idx] == [(2,), (2, 2), (2, 2, 2)]
