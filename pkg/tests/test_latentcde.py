"""Tests for controlled-ResNet latent states and BPTT gradients."""

import numpy as np
import pytest

from sigsurv.errors import NumericalError
from sigsurv.latentcde import (
    AffineField,
    NCDEBatch,
    NeuralField,
    PolynomialScalarField,
    bptt_gradients,
    ncde_states,
    resnet_step,
    solve_controlled,
    standardize_apply,
    standardize_fit,
)
from sigsurv.timeseries import (
    Dataset,
    SampledPath,
    SurvivalRecord,
    embed_linear,
)

from helpers import finite_difference


class PickChannelField:
    """G(z) has every row equal to e_1: update adds dx[0] to all coordinates."""

    def __init__(self, p, d):
        self.p, self.d = p, d

    def evaluate(self, z):
        G = np.zeros((self.p, self.d))
        G[:, 0] = 1.0
        return G


class TestResnetStep:
    def test_channel_pick(self):
        z = np.array([1.0, 2.0])
        out = resnet_step(z, PickChannelField(2, 3), np.array([0.5, 9.0, -1.0]))
        np.testing.assert_allclose(out, z + 0.5)

    def test_zero_increment(self):
        field = NeuralField(2, 3, hidden=8, seed=0)
        z = np.array([0.3, -0.7])
        np.testing.assert_allclose(resnet_step(z, field, np.zeros(3)), z)

    def test_scalar_affine_two_steps(self):
        a, b = 0.5, 2.0
        field = AffineField(A=np.array([[[a]]]), b=np.array([[b]]))
        d1, d2 = 0.3, -0.2
        z = resnet_step(np.zeros(1), field, np.array([d1]))
        z = resnet_step(z, field, np.array([d2]))
        expected = (1 + a * d2) * ((1 + a * d1) * 0.0 + b * d1) + b * d2
        assert z[0] == pytest.approx(expected, rel=1e-12)


def sine_path(n=33, horizon=1.0, amp=0.5):
    t = np.linspace(0, horizon, n)
    return SampledPath(times=t, values=amp * np.sin(2 * np.pi * t)[:, None])


class TestSolveControlled:
    def test_zero_field_constant(self):
        field = AffineField(A=np.zeros((1, 2, 1)), b=np.zeros((1, 2)))
        emb = embed_linear(sine_path())
        traj = solve_controlled(np.array([1.5]), field, emb)
        np.testing.assert_allclose(traj.values, 1.5)

    def test_constant_field_exact_any_substeps(self):
        c = np.array([[0.7, -0.3]])
        field = AffineField(A=np.zeros((1, 2, 1)), b=c)
        emb = embed_linear(sine_path())
        for substeps in (1, 3, 10):
            traj = solve_controlled(np.zeros(1), field, emb, substeps=substeps)
            x_end = emb.start + emb.increments.sum(axis=0)
            expected = c[0] @ (x_end - emb.start)
            assert traj.values[-1, 0] == pytest.approx(expected, abs=1e-12)

    def test_affine_field_first_order_convergence(self):
        field = AffineField(A=np.array([[[0.8], [-0.4]]]).reshape(1, 2, 1),
                            b=np.array([[0.5, 0.9]]))
        emb = embed_linear(sine_path(n=9))
        ref = solve_controlled(np.zeros(1), field, emb, substeps=2048).values[-1, 0]
        subs = np.array([1, 2, 4, 8, 16])
        errs = []
        for s in subs:
            z = solve_controlled(np.zeros(1), field, emb, substeps=int(s)).values[-1, 0]
            errs.append(abs(z - ref))
        slope = -np.polyfit(np.log(subs), np.log(errs), 1)[0]
        assert 0.8 <= slope <= 1.2

    def test_divergence_guard(self):
        field = AffineField(A=np.array([[[80.0]]]), b=np.array([[80.0]]))
        p = SampledPath(times=np.linspace(0, 50, 200), values=np.zeros((200, 0)))
        emb = embed_linear(p)
        with pytest.raises(NumericalError):
            solve_controlled(np.ones(1), field, emb, substeps=1)

    def test_grid_invariance_constant_field(self):
        c = np.array([[0.7, -0.3, 0.2]])
        field = AffineField(A=np.zeros((1, 3, 1)), b=c)
        rng = np.random.default_rng(0)
        t1 = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, 5)), [1.0]])
        t2 = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, 11)), [1.0]])
        end = np.array([0.4, -1.0])
        p1 = SampledPath(times=t1, values=np.outer(t1, end))
        p2 = SampledPath(times=t2, values=np.outer(t2, end))
        z1 = solve_controlled(np.zeros(1), field, embed_linear(p1)).values[-1]
        z2 = solve_controlled(np.zeros(1), field, embed_linear(p2)).values[-1]
        np.testing.assert_allclose(z1, z2, atol=1e-12)


def make_record(rng, n_obs=6, d_raw=1, n_statics=1, event=1, rid="r"):
    times = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 1.0, n_obs - 1))])
    values = rng.normal(size=(n_obs, d_raw)) * 0.5
    event_time = times[-1] + float(rng.uniform(0.0, 0.2))
    return SurvivalRecord(
        path=SampledPath(times=times, values=values),
        statics=rng.normal(size=n_statics) * 0.5,
        event_time=event_time, event_indicator=event, record_id=rid,
    )


class TestNCDEStates:
    def test_initial_zero_and_piecewise_updates(self):
        rng = np.random.default_rng(1)
        rec = make_record(rng)
        field = NeuralField(4, 2, hidden=8, seed=3)
        states = ncde_states(field, rec.path)
        assert states.shape == (rec.path.n_obs, 4)
        np.testing.assert_array_equal(states[0], 0.0)

    def test_matches_stepwise(self):
        rng = np.random.default_rng(2)
        rec = make_record(rng, d_raw=2)
        field = NeuralField(3, 3, hidden=8, seed=4)
        states = ncde_states(field, rec.path)
        z = np.zeros(3)
        for k in range(1, rec.path.n_obs):
            dx = np.concatenate([
                rec.path.values[k] - rec.path.values[k - 1],
                [rec.path.times[k] - rec.path.times[k - 1]],
            ])
            z = resnet_step(z, field, dx)
            np.testing.assert_allclose(states[k], z, atol=1e-12)


class TestBPTT:
    def test_one_step_terminal_loss_hand_derived(self):
        # scalar network (p = d = hidden = 1), one update from z = 0
        field = NeuralField(1, 1, hidden=1, seed=9)
        w1, w2, w3 = (w.item() for w in field.weights)
        b1, b2, b3 = (b.item() for b in field.biases)
        rec = SurvivalRecord(
            path=SampledPath(times=[0.0, 1.0], values=np.zeros((2, 0))),
            statics=[], event_time=1.0, event_indicator=1,
        )
        # the time channel is the increment here: path has d_raw = 0
        value, grads = bptt_gradients(field, np.zeros(1), np.zeros(0), [rec],
                                      loss="terminal_sq")
        h1 = np.tanh(b1)
        h2 = np.tanh(h1 * w2 + b2)
        o = np.tanh(h2 * w3 + b3)
        z1 = o * 1.0  # dt = 1
        assert value == pytest.approx(0.5 * z1**2, rel=1e-12)
        g_pre3 = z1 * 1.0 * (1 - o**2)
        assert grads["b3"][0] == pytest.approx(g_pre3, rel=1e-10)
        assert grads["W3"][0, 0] == pytest.approx(g_pre3 * h2, rel=1e-10)
        g_pre2 = g_pre3 * w3 * (1 - h2**2)
        assert grads["b2"][0] == pytest.approx(g_pre2, rel=1e-10)
        assert grads["W2"][0, 0] == pytest.approx(g_pre2 * h1, rel=1e-10)
        g_pre1 = g_pre2 * w2 * (1 - h1**2)
        assert grads["b1"][0] == pytest.approx(g_pre1, rel=1e-10)
        assert grads["W1"][0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_zero_increment_path_zero_field_grads(self):
        rec = SurvivalRecord(
            path=SampledPath(times=[0.0], values=[[1.0]]),
            statics=[0.5], event_time=1.0, event_indicator=1,
        )
        field = NeuralField(2, 2, hidden=4, seed=0)
        value, grads = bptt_gradients(field, np.ones(2), np.ones(1), [rec])
        for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
            np.testing.assert_allclose(grads[name], 0.0, atol=1e-15)
        assert np.isfinite(value)

    def _pack(self, field, alpha, beta):
        parts = [field.weights[0].ravel(), field.biases[0].ravel(),
                 field.weights[1].ravel(), field.biases[1].ravel(),
                 field.weights[2].ravel(), field.biases[2].ravel(),
                 alpha.ravel(), beta.ravel()]
        return np.concatenate(parts)

    def _unpack(self, x, field, alpha, beta):
        shapes = [field.weights[0].shape, field.biases[0].shape,
                  field.weights[1].shape, field.biases[1].shape,
                  field.weights[2].shape, field.biases[2].shape,
                  alpha.shape, beta.shape]
        out, pos = [], 0
        for sh in shapes:
            size = int(np.prod(sh))
            out.append(x[pos:pos + size].reshape(sh))
            pos += size
        return out

    def test_finite_difference_nll_five_step(self):
        rng = np.random.default_rng(5)
        records = [make_record(rng, n_obs=5, d_raw=1, rid=str(i), event=i % 2)
                   for i in range(3)]
        field = NeuralField(2, 2, hidden=3, seed=7)
        alpha = rng.normal(size=2) * 0.5
        beta = rng.normal(size=1) * 0.5

        _, grads = bptt_gradients(field, alpha, beta, records)
        analytic = np.concatenate([
            grads["W1"].ravel(), grads["b1"].ravel(), grads["W2"].ravel(),
            grads["b2"].ravel(), grads["W3"].ravel(), grads["b3"].ravel(),
            grads["alpha"].ravel(), grads["beta"].ravel(),
        ])

        x0 = self._pack(field, alpha, beta)

        def fun(x):
            f = NeuralField(2, 2, hidden=3, seed=7)
            w1, bb1, w2, bb2, w3, bb3, a, b = self._unpack(x, f, alpha, beta)
            f.weights = [w1, w2, w3]
            f.biases = [bb1, bb2, bb3]
            value, _ = bptt_gradients(f, a, b, records)
            return value

        numeric = finite_difference(fun, x0, eps=1e-5)
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4

    def test_determinism(self):
        rng = np.random.default_rng(6)
        records = [make_record(rng, rid=str(i)) for i in range(4)]
        field = NeuralField(2, 2, hidden=4, seed=11)
        alpha, beta = np.array([0.2, -0.1]), np.array([0.3])
        v1, g1 = bptt_gradients(field, alpha, beta, records)
        v2, g2 = bptt_gradients(field, alpha, beta, records)
        assert v1 == v2
        for k in g1:
            assert np.array_equal(g1[k], g2[k])


class TestSerialization:
    def test_round_trip(self):
        field = NeuralField(4, 3, hidden=6, seed=2)
        blob = field.to_json()
        back = NeuralField.from_json(blob)
        for w1, w2 in zip(field.weights, back.weights):
            np.testing.assert_array_equal(w1, w2)
        for b1, b2 in zip(field.biases, back.biases):
            np.testing.assert_array_equal(b1, b2)


class TestStandardize:
    def test_fit_apply(self):
        rng = np.random.default_rng(8)
        recs = [make_record(rng, n_obs=5, d_raw=2, rid=str(i)) for i in range(6)]
        ds = Dataset(records=recs, horizon=2.0)
        mean, std = standardize_fit(ds)
        out = standardize_apply(ds, mean, std)
        stacked = np.concatenate([r.path.values for r in out.records])
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-12)


def test_polynomial_scalar_field_eval():
    field = PolynomialScalarField([[1.0, 2.0], [0.5]])
    G = field.evaluate(np.array([0.3]))
    np.testing.assert_allclose(G, [[1.0 + 2.0 * 0.3, 0.5]])
