import math

import numpy as np
import pytest

from featproj_dp import accountant
from featproj_dp import models as M
from featproj_dp import optimizer as O
from featproj_dp.accountant import PrivacySpec
from featproj_dp.numerics import ContractViolation, RngStream
from featproj_dp.subspace import ProjectionBasis


def regression_data(n=120, m=20, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n + m, 6))
    Y = np.tanh(X @ rng.standard_normal((6, 3)))
    F = 0.5 * X + 0.25  # stand-in feature map
    return O.TrainData(O.PrivateBatch(X[:n], Y[:n]), O.PublicBatch(F[:n], Y[:n]),
                       O.PublicSet(X[n:], F[n:], Y[n:]))


def mlp():
    return M.Model(M.ModelSpec(M.MLP2, 6, 8, output_dim=3))


def spec_for(q, steps, sigma=1.2, C=0.5, eps=50.0):
    return PrivacySpec(eps, 1e-5, C, sigma, q, steps)


class TestClip:
    def test_long_vector_scaled(self):
        np.testing.assert_allclose(O.clip_gradient(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    def test_short_vector_untouched(self):
        g = np.array([0.3, 0.4])
        assert O.clip_gradient(g, 1.0).tobytes() == g.tobytes()

    def test_zero_vector(self):
        np.testing.assert_array_equal(O.clip_gradient(np.zeros(3), 1.0), np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(ContractViolation):
            O.clip_gradient(np.array([np.nan, 1.0]), 1.0)

    def test_rows(self):
        G, norms = O.clip_rows(np.array([[3.0, 4.0], [0.1, 0.0]]), 1.0)
        np.testing.assert_allclose(G, [[0.6, 0.8], [0.1, 0.0]])
        np.testing.assert_allclose(norms, [5.0, 0.1])


class TestNoisyAggregate:
    def test_noise_free_mean(self):
        rows = np.array([[0.5, 0.0], [0.0, -0.5]])
        out = O.noisy_aggregate(rows, 1.0, 0.0, RngStream(0))
        np.testing.assert_array_equal(out, [0.25, -0.25])

    def test_noise_std(self):
        out = O.noisy_aggregate(np.zeros((1, 40_000)), 1.0, 0.5, RngStream(12))
        # se of the sample std with n=40000 is ~0.18%; 3% is very loose
        assert abs(out.std() / 0.5 - 1) < 0.03
        assert abs(out.mean()) < 0.01

    def test_same_stream_same_draw(self):
        rows = np.full((3, 5), 0.1)
        a = O.noisy_aggregate(rows, 1.0, 1.0, RngStream(4, 3))
        b = O.noisy_aggregate(rows, 1.0, 1.0, RngStream(4, 3))
        assert a.tobytes() == b.tobytes()

    def test_expected_batch_size_denominator(self):
        rows = np.full((2, 3), 0.1)
        out = O.noisy_aggregate(rows, 1.0, 0.0, RngStream(0), batch_size=4.0)
        np.testing.assert_allclose(out, [0.05, 0.05, 0.05])

    def test_unclipped_rows_rejected(self):
        with pytest.raises(ContractViolation):
            O.noisy_aggregate(np.array([[3.0, 4.0]]), 1.0, 1.0, RngStream(0))

    def test_poisson_rate(self):
        idx = O.poisson_sample(RngStream(1), 100_000, 0.05)
        assert abs(len(idx) / 5000 - 1) < 0.05


class TestStep:
    def test_hand_computed_update(self):
        # f(w; x) = w0 x + w1, loss 0.5 (f - y)^2
        model = M.Model(M.ModelSpec(M.LINEAR, 1))
        w = np.array([1.0, 0.5])
        priv = O.PrivateBatch(np.array([[2.0]]), np.array([1.0]))
        pub = O.PublicBatch(np.array([[1.0]]), np.array([1.0]))
        basis = ProjectionBasis.from_matrix(np.array([[1.0], [1.0]]) / math.sqrt(2))
        spec = PrivacySpec(1.0, 1e-5, 1.0, 0.0, 1.0, 1)
        w_next, rec = O.fp_dp_step(model, w, priv, pub, basis, spec, 0.1, RngStream(0), denom=1.0)
        expected = w - 0.1 * (0.5 + 3 / (2 * math.sqrt(5))) * np.ones(2)
        np.testing.assert_allclose(w_next, expected, rtol=1e-14)
        assert rec.clipped_fraction == 1.0 and rec.noise_norm == 0.0

    def test_orthogonal_basis_annihilates_private_term(self):
        model = M.Model(M.ModelSpec(M.LINEAR, 1))
        w = np.array([1.0, 0.5])
        # per-sample gradient is r (x, 1) = 1.5 (2, 1); (1, -2) is orthogonal to it
        priv = O.PrivateBatch(np.array([[2.0]]), np.array([1.0]))
        basis = ProjectionBasis.from_matrix(np.array([[1.0], [-2.0]]) / math.sqrt(5))
        spec = PrivacySpec(1.0, 1e-5, 1.0, 0.0, 1.0, 1)
        w_next, _ = O.fp_dp_step(model, w, priv, None, basis, spec, 0.1, RngStream(0), denom=1.0)
        np.testing.assert_allclose(w_next, w, atol=1e-15)

    @pytest.mark.parametrize("with_basis", [False, True])
    def test_explicit_path_matches_fast_path(self, with_basis):
        data = regression_data()
        model = mlp()
        w = model.init_params(RngStream(1))
        idx = np.arange(0, 40)
        priv = O.PrivateBatch(data.private.inputs[idx], data.private.targets[idx])
        pub = O.PublicBatch(data.private_features.features[idx], data.private_features.targets[idx])
        basis = None
        if with_basis:
            Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((model.p, 5)))
            basis = ProjectionBasis.from_matrix(Q)
        spec = spec_for(0.3, 10, C=0.05)
        a, ra = O.fp_dp_step(model, w, priv, pub, basis, spec, 0.5, RngStream(9, 3), denom=36.0)
        b, rb = O.fp_dp_step(model, w, priv, pub, basis, spec, 0.5, RngStream(9, 3), denom=36.0,
                             explicit=True)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
        assert ra.clipped_fraction == rb.clipped_fraction

    def test_stale_basis_rejected(self):
        model = M.Model(M.ModelSpec(M.LINEAR, 1))
        priv = O.PrivateBatch(np.array([[2.0]]), np.array([1.0]))
        spec = PrivacySpec(1.0, 1e-5, 1.0, 0.0, 1.0, 1)
        basis = ProjectionBasis.identity(2, step=0)
        with pytest.raises(ContractViolation, match="stale"):
            O.fp_dp_step(model, np.zeros(2), priv, None, basis, spec, 0.1, RngStream(0),
                         denom=1.0, step=7, refresh_interval=5)

    def test_noise_free_private_step_equals_sgd_step(self):
        data = regression_data()
        model = mlp()
        w = model.init_params(RngStream(2))
        priv = O.PrivateBatch(data.private.inputs[:30], data.private.targets[:30])
        spec = PrivacySpec(1.0, 1e-5, 1e300, 0.0, 0.25, 1)
        a, _ = O.fp_dp_step(model, w, priv, None, None, spec, 0.3, RngStream(0), denom=30.0)
        b, _ = O.fp_dp_step(model, w, priv, None, None, None, 0.3, RngStream(0), denom=30.0,
                            private=False)
        assert a.tobytes() == b.tobytes()


class TestTrainReductions:
    """Special cases of the combined update reproduce the simpler variants exactly."""

    def run(self, variant, k=None, public_weight=1.0, steps=12):
        data = regression_data()
        model = mlp()
        q = 0.2
        hyper = O.Hyper(eta=0.5, steps=steps, q=q, k=k, refresh=4, public_weight=public_weight)
        return O.train(variant, model, data, spec_for(q, steps), hyper, RngStream(5, 1000))

    def test_projected_full_rank_is_dpsgd(self):
        assert self.run(O.PROJ_DPSGD, k=None).w.tobytes() == self.run(O.DPSGD).w.tobytes()

    def test_feature_projective_full_rank_is_fdp(self):
        a = self.run(O.FEATURE_PROJECTIVE, k=None).w
        assert a.tobytes() == self.run(O.FDP).w.tobytes()

    def test_fdp_without_public_loss_is_dpsgd(self):
        assert self.run(O.FDP, public_weight=0.0).w.tobytes() == self.run(O.DPSGD).w.tobytes()

    def test_feature_projective_without_public_loss_is_projected(self):
        a = self.run(O.FEATURE_PROJECTIVE, k=4, public_weight=0.0)
        b = self.run(O.PROJ_DPSGD, k=4, public_weight=0.0)
        assert a.w.tobytes() == b.w.tobytes()

    def test_k_at_least_p_uses_identity(self):
        r = self.run(O.PROJ_DPSGD, k=10_000)
        assert all(b.is_identity for b in r.bases)
        assert r.w.tobytes() == self.run(O.DPSGD).w.tobytes()

    def test_basis_refreshed_on_schedule(self):
        r = self.run(O.FEATURE_PROJECTIVE, k=4, steps=12)
        assert [b.refreshed_at_step for b in r.bases] == [0, 4, 8]

    @pytest.mark.parametrize("variant,k", [(O.DPSGD, None), (O.FEATURE_PROJECTIVE, None),
                                           (O.FEATURE_PROJECTIVE, 10_000)])
    def test_noise_free_unclipped_is_sgd(self, variant, k):
        data = regression_data()
        q, steps = 0.2, 30
        hyper = O.Hyper(eta=0.5, steps=steps, q=q, k=k, refresh=4, public_weight=0.0)
        ref = O.train(O.SGD, mlp(), data, None, hyper, RngStream(5))
        spec = PrivacySpec(1.0, 1e-5, 1e6, 0.0, q, steps)
        r = O.train(variant, mlp(), data, spec, hyper, RngStream(5))
        assert all(rec.clipped_fraction == 0 for rec in r.history)
        assert r.w.tobytes() == ref.w.tobytes()
        assert r.accounted_epsilon == math.inf and not r.halted

    def test_deterministic(self):
        a = self.run(O.FEATURE_PROJECTIVE, k=4)
        b = self.run(O.FEATURE_PROJECTIVE, k=4)
        assert a.w.tobytes() == b.w.tobytes()


class TestFirewall:
    def test_private_inputs_reach_only_the_clipped_path(self, monkeypatch):
        data = regression_data()
        model = mlp()
        seen = {"clipped": [], "batch": [], "per_sample": []}
        for name, key in [("clipped_grad_sum", "clipped"), ("batch_grad", "batch"),
                          ("trainable_per_sample_grad", "per_sample")]:
            orig = getattr(model, name)

            def wrapped(w, X, *args, _orig=orig, _key=key, **kw):
                seen[_key].append(np.array(X))
                return _orig(w, X, *args, **kw)

            monkeypatch.setattr(model, name, wrapped)
        hyper = O.Hyper(eta=0.5, steps=10, q=0.2, k=4, refresh=5)
        O.train(O.FEATURE_PROJECTIVE, model, data, spec_for(0.2, 10), hyper, RngStream(3))

        def rows_of(X, source):
            return all(np.any(np.all(source == r, axis=1)) for r in X)

        raw = data.private.inputs
        assert seen["clipped"] and seen["batch"] and seen["per_sample"]
        assert all(rows_of(X, raw) for X in seen["clipped"])
        # the public loss sees only ψ(S_priv), never a raw private row
        for X in seen["batch"]:
            assert rows_of(X, data.private_features.features)
            assert not any(np.any(np.all(raw == r, axis=1)) for r in X)
        # the basis sees only the public set
        ps = data.public_set
        for X in seen["per_sample"]:
            assert rows_of(X, np.vstack([ps.inputs, ps.features]))


class TestTrain:
    def test_halts_at_budget(self):
        data = regression_data()
        q, budget_steps = 0.2, 20
        sigma = accountant.calibrate_sigma(2.0, 1e-5, q, budget_steps)
        spec = PrivacySpec(2.0, 1e-5, 0.5, sigma, q, budget_steps)
        r = O.train(O.DPSGD, mlp(), data, spec, O.Hyper(eta=0.5, steps=60, q=q), RngStream(1))
        assert r.halted and budget_steps <= r.steps_run < 60
        assert r.accounted_epsilon <= 2.0

    def test_accounted_epsilon_matches_accountant(self):
        data = regression_data()
        spec = spec_for(0.2, 15)
        r = O.train(O.DPSGD, mlp(), data, spec, O.Hyper(eta=0.5, steps=15, q=0.2), RngStream(1))
        assert not r.halted and r.steps_run == 15
        assert r.accounted_epsilon == accountant.epsilon_for(spec.sigma, 0.2, 15, spec.delta,
                                                             spec.orders)

    def test_sgd_fits_linear_regression(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((200, 3))
        y = X @ [0.5, -1.0, 2.0] + 0.3
        model = M.Model(M.ModelSpec(M.LINEAR, 3))
        data = O.TrainData(O.PrivateBatch(X, y))
        r = O.train(O.SGD, model, data, None, O.Hyper(eta=0.5, steps=300, q=1.0), RngStream(0))
        assert model.losses(r.w, X, y).mean() < 1e-6
        np.testing.assert_allclose(r.w, [0.5, -1.0, 2.0, 0.3], atol=1e-4)

    def test_frozen_coordinates_never_move(self):
        data = regression_data()
        model = mlp()
        model.set_trainable(M.trainable_ranges_for(model, ["W2", "b2"]))
        w0 = model.init_params(RngStream(8))
        hyper = O.Hyper(eta=0.5, steps=10, q=0.2, k=4, refresh=5)
        r = O.train(O.FEATURE_PROJECTIVE, model, data, spec_for(0.2, 10), hyper, RngStream(3), w0)
        frozen = ~model.trainable_mask
        assert r.w[frozen].tobytes() == w0[frozen].tobytes()
        assert not np.array_equal(r.w[~frozen], w0[~frozen])

    def test_projection_shrinks_noise(self):
        data = regression_data()
        hyper = O.Hyper(eta=0.5, steps=8, q=0.2, k=4, refresh=4)
        r = O.train(O.PROJ_DPSGD, mlp(), data, spec_for(0.2, 8), hyper, RngStream(3))
        for rec in r.history:
            assert rec.projected_noise_norm < rec.noise_norm

    def test_unknown_variant(self):
        with pytest.raises(ContractViolation):
            O.train("ADAM", mlp(), regression_data(), None, O.Hyper(), RngStream(0))

    def test_private_variant_needs_spec(self):
        with pytest.raises(ContractViolation):
            O.train(O.DPSGD, mlp(), regression_data(), None, O.Hyper(q=0.2), RngStream(0))
