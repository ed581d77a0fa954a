import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.linalg import cho_solve

from conftest import make_emulator
from egocal.gp import (Design, DegenerateDesignError, DuplicatePointError,
                       FieldPredictor, GpHyperparams, InputPoint, InputSpace,
                       KernelSpec, TrainedEmulator, build_correlation_matrix,
                       fit_hyperparameters, kernel_eval, loo_diagnostics,
                       marginal_log_likelihood, robust_cholesky, train_emulator)

UNIT2 = InputSpace(x_box=[[0.0, 1.0]], tau_box=[[0.0, 1.0]])


class TestKernels:
    def test_correlation_is_one_at_zero_lag(self):
        k = KernelSpec("matern52", [0.4, 1.3])
        p = InputPoint([0.3], [0.9])
        assert kernel_eval(k, p, p) == 1.0

    def test_squared_exponential_unit_separation(self):
        # direct evaluation of exp(-r^2/2) at r=1
        k = KernelSpec("squared-exponential", [1.0, 1.0])
        val = kernel_eval(k, [0.0, 0.0], [1.0, 0.0])
        assert val == pytest.approx(0.6065306597126334, abs=1e-15)

    def test_decay_at_long_range(self):
        k = KernelSpec("matern52", [1.0])
        assert kernel_eval(k, [0.0], [20.0]) < 1e-6

    def test_symmetry(self):
        k = KernelSpec("matern52", [0.7, 0.2])
        a, b = [0.1, 0.9], [0.8, 0.3]
        assert kernel_eval(k, a, b) == pytest.approx(kernel_eval(k, b, a), abs=1e-15)

    def test_dimension_mismatch_raises(self):
        k = KernelSpec("matern52", [1.0, 1.0])
        with pytest.raises(ValueError):
            kernel_eval(k, [0.0], [1.0])
        with pytest.raises(ValueError):
            kernel_eval(k, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])

    def test_nonpositive_lengthscale_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec("matern52", [1.0, 0.0])
        with pytest.raises(ValueError):
            KernelSpec("squared-exponential", [-1.0])

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec("cubic", [1.0])

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.05, 3),
           st.sampled_from(["matern52", "squared-exponential"]))
    def test_bounds_with_equality_only_at_zero_lag(self, a, b, ls, family):
        # strict inequalities hold on the float64-resolvable range: exp
        # underflows to 0 beyond ~ -745, and the kernel rounds to exactly 1
        # below separations ~ cbrt(eps) (the dedup radius exists for this)
        r = abs(a - b) / ls
        assume(r**2 / 2 < 700)
        k = KernelSpec(family, [ls])
        val = kernel_eval(k, [a], [b])
        assert 0.0 < val <= 1.0
        if r > 1e-5:
            assert val < 1.0


class TestCorrelationMatrix:
    def test_single_point(self):
        mat = build_correlation_matrix(KernelSpec("matern52", [1.0]), [[0.3]], 0.0)
        assert mat.shape == (1, 1) and mat[0, 0] == 1.0

    def test_duplicate_points_with_nugget_factorize(self):
        mat = build_correlation_matrix(KernelSpec("matern52", [1.0]),
                                       [[0.5], [0.5]], 1e-8)
        assert mat[0, 1] == 1.0 and mat[0, 0] == 1.0 + 1e-8
        np.linalg.cholesky(mat)  # must not raise

    def test_random_points_positive_definite(self):
        # eigendecomposition oracle
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1, size=(10, 3))
        mat = build_correlation_matrix(KernelSpec("matern52", [0.5, 0.5, 0.5]), pts, 0.0)
        assert np.linalg.eigvalsh(mat).min() > 0

    def test_robust_cholesky_escalates(self):
        mat = np.ones((3, 3))  # rank one; needs jitter
        L, used = robust_cholesky(mat, nugget=1e-8)
        assert used >= 1e-8
        assert np.allclose(L @ L.T, mat + used * np.eye(3), atol=1e-12)

    def test_robust_cholesky_gives_up_on_indefinite(self):
        mat = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(DegenerateDesignError):
            robust_cholesky(mat)

    def test_negative_nugget_rejected(self):
        with pytest.raises(ValueError):
            build_correlation_matrix(KernelSpec("matern52", [1.0]), [[0.0]], -1e-3)


class TestDesign:
    def test_lengths_must_match(self):
        with pytest.raises(ValueError):
            Design(UNIT2, [[0.1, 0.2]], [1.0, 2.0])

    def test_duplicates_rejected_by_default(self):
        pts = [[0.1, 0.2], [0.1, 0.2]]
        with pytest.raises(DuplicatePointError):
            Design(UNIT2, pts, [1.0, 1.0])

    def test_append_dedup_flag(self):
        d = Design(UNIT2, [[0.1, 0.2]], [1.0])
        with pytest.raises(DuplicatePointError):
            d.append([[0.1, 0.2]], [1.0])
        d2 = d.append([[0.1, 0.2]], [1.0], dedup=False)
        assert d2.n == 2 and d.n == 1  # append returns a new design

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Design(UNIT2, [[np.nan, 0.2]], [1.0])
        with pytest.raises(ValueError):
            Design(UNIT2, [[0.1, 0.2]], [np.inf])


def _random_design(rng, n, d=1, m=1):
    space = InputSpace(x_box=[[0.0, 1.0]] * d, tau_box=[[0.0, 1.0]] * m)
    pts = rng.uniform(0, 1, size=(n, d + m))
    y = rng.standard_normal(n) * rng.uniform(0.5, 3)
    return space, pts, y


class TestPredict:
    def test_interpolates_training_runs(self):
        rng = np.random.default_rng(0)
        space, pts, y = _random_design(rng, 15)
        em = make_emulator(space, pts, y, psi=[0.3, 0.3], sigma2=2.0, beta=0.1)
        mean, cov = em.predict(pts)
        assert np.all(np.abs(mean - y) <= 1e-6 * (1.0 + np.abs(y)))
        assert np.all(np.diag(cov) <= 10 * em.hyper.nugget * em.hyper.sigma2)

    def test_reverts_to_prior_far_away(self):
        space = InputSpace(x_box=[[0.0, 100.0]], tau_box=[[0.0, 100.0]])
        pts = np.array([[1.0, 1.0], [2.0, 1.5], [1.5, 2.5]])
        em = make_emulator(space, pts, [3.0, 4.0, 5.0], psi=[0.005, 0.005],
                           sigma2=1.7, beta=2.0)
        mean, cov = em.predict([[90.0, 90.0]])
        assert mean[0] == pytest.approx(2.0, abs=1e-6)
        assert cov[0, 0] == pytest.approx(1.7, abs=1e-6)

    def test_one_point_design_closed_form(self):
        # hand-solved 1x1 system: mean = beta + C*(y-beta), var = sigma2*(1-C^2)
        space = UNIT2
        em = make_emulator(space, [[0.2, 0.4]], [1.3], psi=[0.5, 0.5],
                           sigma2=2.5, beta=0.7, nugget=0.0)
        v = np.array([[0.6, 0.1]])
        C = kernel_eval(KernelSpec("matern52", [0.5, 0.5]),
                        space.scale(v)[0], space.scale([[0.2, 0.4]])[0])
        mean, cov = em.predict(v)
        assert mean[0] == pytest.approx(0.7 + C * (1.3 - 0.7), abs=1e-10)
        assert cov[0, 0] == pytest.approx(2.5 * (1.0 - C**2), abs=1e-10)

    def test_covariance_symmetric_and_near_psd(self):
        rng = np.random.default_rng(5)
        space, pts, y = _random_design(rng, 12)
        em = make_emulator(space, pts, y, psi=[0.4, 0.6], sigma2=1.3)
        for _ in range(5):
            q = rng.uniform(0, 1, size=(20, 2))
            _, cov = em.predict(q)
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() >= -1e-8 * em.hyper.sigma2
            assert np.diag(cov).min() >= 0.0

    def test_variance_only_path_matches_full(self):
        rng = np.random.default_rng(6)
        space, pts, y = _random_design(rng, 10)
        em = make_emulator(space, pts, y, psi=[0.5, 0.5])
        q = rng.uniform(0, 1, size=(7, 2))
        m1, cov = em.predict(q)
        m2, var = em.predict(q, full_cov=False)
        assert np.allclose(m1, m2)
        assert np.allclose(np.diag(cov), var, atol=1e-12)


class TestSamplePaths:
    def test_zero_count(self):
        em = make_emulator(UNIT2, [[0.2, 0.2]], [1.0], psi=[0.5, 0.5])
        assert em.sample_paths([[0.5, 0.5]], 0).shape == (0, 1)

    def test_training_points_are_reproduced(self):
        rng = np.random.default_rng(1)
        space, pts, y = _random_design(rng, 8)
        em = make_emulator(space, pts, y, psi=[0.4, 0.4])
        draws = em.sample_paths(pts, 20, seed=3)
        assert np.allclose(draws, y[None, :], atol=1e-4)

    def test_moments_match_prediction(self):
        # Monte Carlo vs closed form at a far point
        space = InputSpace(x_box=[[0.0, 50.0]], tau_box=[[0.0, 50.0]])
        em = make_emulator(space, [[1.0, 1.0]], [2.0], psi=[0.01, 0.01],
                           sigma2=1.5, beta=0.5)
        pt = [[45.0, 45.0]]
        draws = em.sample_paths(pt, 100000, seed=9)[:, 0]
        se_mean = np.sqrt(1.5 / draws.size)
        assert abs(draws.mean() - 0.5) < 3 * se_mean
        se_var = 1.5 * np.sqrt(2.0 / draws.size)
        assert abs(draws.var() - 1.5) < 3 * se_var

    def test_deterministic_under_seed(self):
        em = make_emulator(UNIT2, [[0.2, 0.8]], [1.0], psi=[0.5, 0.5])
        a = em.sample_paths([[0.5, 0.5], [0.6, 0.1]], 5, seed=7)
        b = em.sample_paths([[0.5, 0.5], [0.6, 0.1]], 5, seed=7)
        assert np.array_equal(a, b)


class TestFit:
    def test_constant_outputs(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1, size=(10, 2))
        h = fit_hyperparameters(Design(UNIT2, pts, np.full(10, 3.25)))
        assert h.beta[0] == pytest.approx(3.25, abs=1e-9)
        assert 0 < h.sigma2 <= 1e-6

    def test_output_scaling_equivariance(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 1, size=(14, 2))
        y = np.sin(5 * pts[:, 0]) + pts[:, 1]
        h1 = fit_hyperparameters(Design(UNIT2, pts, y), seed=0)
        h2 = fit_hyperparameters(Design(UNIT2, pts, 2 * y), seed=0)
        assert h2.sigma2 == pytest.approx(4 * h1.sigma2, rel=1e-6)
        assert np.allclose(h2.kernel.lengthscales, h1.kernel.lengthscales, rtol=1e-6)

    def test_recovers_known_lengthscales(self):
        # simulation oracle: draws from a GP with psi=0.3, sigma2=1
        ok = 0
        for rep in range(20):
            rng = np.random.default_rng(100 + rep)
            pts = rng.uniform(0, 1, size=(60, 2))
            K = build_correlation_matrix(KernelSpec("matern52", [0.3, 0.3]), pts, 1e-10)
            y = np.linalg.cholesky(K) @ rng.standard_normal(60)
            h = fit_hyperparameters(Design(UNIT2, pts, y), seed=rep)
            ratio = h.kernel.lengthscales / 0.3
            ok += bool(np.all((ratio > 0.5) & (ratio < 2.0)))
        assert ok >= 16  # at least 80% of replicates

    def test_needs_enough_points(self):
        with pytest.raises(ValueError):
            fit_hyperparameters(Design(UNIT2, [[0.1, 0.5], [0.9, 0.2]], [1.0, 2.0]))

    def test_profiled_beta_is_gls(self):
        # independent dense generalized-least-squares solve
        rng = np.random.default_rng(8)
        for trend in ("constant", "linear"):
            pts = rng.uniform(0, 1, size=(18, 2))
            y = 1.0 + pts @ [2.0, -1.0] + 0.3 * rng.standard_normal(18)
            design = Design(UNIT2, pts, y)
            h = fit_hyperparameters(design, trend=trend, seed=0)
            C = build_correlation_matrix(h.kernel, design.scaled, h.nugget)
            Kinv = np.linalg.inv(C)
            H = np.ones((18, 1)) if trend == "constant" else \
                np.hstack([np.ones((18, 1)), design.scaled])
            beta_gls = np.linalg.solve(H.T @ Kinv @ H, H.T @ Kinv @ y)
            assert np.allclose(h.beta, beta_gls, rtol=1e-8, atol=1e-10)

    def test_fitted_point_beats_random_hyperparameters(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(0, 1, size=(20, 2))
        y = np.sin(6 * pts[:, 0]) * np.cos(3 * pts[:, 1])
        design = Design(UNIT2, pts, y)
        h = fit_hyperparameters(design, seed=2)
        best = marginal_log_likelihood(design, h)
        for _ in range(100):
            rand = GpHyperparams(
                beta=rng.normal(scale=2, size=1),
                sigma2=float(rng.uniform(0.01, 5)),
                kernel=KernelSpec("matern52", rng.uniform(0.05, 5, size=2)),
                nugget=h.nugget)
            assert marginal_log_likelihood(design, rand) <= best + 1e-9


class TestPersistence:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        rng = np.random.default_rng(10)
        space, pts, y = _random_design(rng, 12)
        em = train_emulator(Design(space, pts, y), seed=0)
        path = tmp_path / "em.json"
        em.save(path)
        em2 = TrainedEmulator.load(path)
        q = rng.uniform(0, 1, size=(9, 2))
        m1, c1 = em.predict(q)
        m2, c2 = em2.predict(q)
        assert np.array_equal(m1, m2) and np.array_equal(c1, c2)

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(ValueError):
            TrainedEmulator.load(path)


class TestLoo:
    def test_matches_refit_without_point(self):
        rng = np.random.default_rng(13)
        space, pts, y = _random_design(rng, 9)
        em = make_emulator(space, pts, y, psi=[0.4, 0.7], sigma2=1.2, beta=0.3)
        loo = loo_diagnostics(em)
        for i in [0, 4, 8]:
            keep = np.arange(9) != i
            em_i = make_emulator(space, pts[keep], y[keep], psi=[0.4, 0.7],
                                 sigma2=1.2, beta=0.3)
            mean_i, cov_i = em_i.predict(pts[i][None, :])
            assert loo["mean"][i] == pytest.approx(mean_i[0], rel=1e-6, abs=1e-8)
            assert loo["sd"][i] ** 2 == pytest.approx(cov_i[0, 0], rel=1e-5, abs=1e-9)


class TestFieldPredictor:
    def test_matches_generic_predict(self, case1_setup):
        em = case1_setup["emulator"]
        field = case1_setup["field"]
        fp = FieldPredictor(em, field.X_f)
        thetas = np.array([[6.2], [11.7], [14.9]])
        mus, covs = fp.mean_cov_batch(thetas)
        for i, th in enumerate(thetas):
            P = np.hstack([field.X_f, np.broadcast_to(th, (field.n, 1))])
            m_ref, c_ref = em.predict(P)
            assert np.allclose(mus[i], m_ref, atol=1e-12)
            assert np.allclose(covs[i], c_ref, atol=1e-12)
            m_s, c_s = fp.mean_cov(th)
            assert np.allclose(m_s, m_ref, atol=1e-12)
            assert np.allclose(c_s, c_ref, atol=1e-12)
        _, var = fp.mean_var_batch(thetas)
        assert np.allclose(var, np.array([np.diag(c) for c in
                                          fp.mean_cov_batch(thetas)[1]]), atol=1e-12)
