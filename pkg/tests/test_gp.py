import numpy as np
import pytest

from gpmorse.dynamics import TrajectoryDataset
from gpmorse.gp import (
    FitError,
    FitOptions,
    GpSurrogate,
    KernelSpec,
    confidence_z,
    fit,
    kernel_matrix,
    profiled_log_likelihood,
)


def naive_predict(model, Xq):
    """Independent dense-solve reference (LU factorization, no caching)."""
    mus, sds = [], []
    for out in model.outputs:
        K = kernel_matrix(out.kernel, model.X, model.X)
        K = K + (out.noise_rel2 + out.jitter) * np.eye(len(model.X))
        kq = kernel_matrix(out.kernel, Xq, model.X)
        mus.append(kq @ np.linalg.solve(K, out.y))
        quad = np.sum(kq * np.linalg.solve(K, kq.T).T, axis=1)
        sds.append(np.sqrt(out.sigma2 * np.maximum(1.0 - quad, 0.0)))
    return np.stack(mus, 1), np.stack(sds, 1)


def toy_model(seed=0, n=40, noise=0.01, floor=1e-6):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, (n, 2))
    Y = np.stack([np.sin(X[:, 0]) * np.cos(X[:, 1]), 0.5 * X[:, 0]], axis=1)
    Y = Y + noise * rng.standard_normal(Y.shape)
    ds = TrajectoryDataset(X, Y)
    return fit(ds, KernelSpec(nu=2.5), FitOptions(restarts=4, noise_floor_rel2=floor), seed=seed)


class TestKernel:
    def test_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (30, 3))
        spec = KernelSpec(nu=1.5, lengthscales=np.array([0.5, 1.0, 2.0]))
        K = kernel_matrix(spec, X, X)
        assert np.allclose(np.diag(K), 1.0)
        assert np.allclose(K, K.T)

    def test_gram_psd_random_inputs(self):
        # Cholesky of K + 1e-8 I succeeds on 100 random input sets
        rng = np.random.default_rng(1)
        periods = np.array([2 * np.pi, 0.0])
        for _ in range(100):
            n = int(rng.integers(5, 60))
            X = np.stack(
                [rng.uniform(-np.pi, np.pi, n), rng.uniform(-3, 3, n)], axis=1
            )
            ls = np.exp(rng.uniform(np.log(0.05), np.log(5.0), 2))
            nu = 1.5 if rng.integers(2) else 2.5
            K = kernel_matrix(KernelSpec(nu=nu, lengthscales=ls, periods=periods), X, X)
            np.linalg.cholesky(K + 1e-8 * np.eye(n))

    def test_periodic_wrap_identifies_seam(self):
        # a pair straddling the seam correlates exactly like an equal-length
        # pair away from it
        spec = KernelSpec(
            nu=2.5, lengthscales=np.array([0.7]), periods=np.array([2 * np.pi])
        )
        seam = kernel_matrix(spec, [[np.pi - 0.05]], [[-np.pi + 0.05]])[0, 0]
        plain = kernel_matrix(spec, [[0.0]], [[0.1]])[0, 0]
        assert seam == pytest.approx(plain, rel=1e-12)
        assert seam > 0.9

    def test_invalid_nu(self):
        with pytest.raises(ValueError):
            KernelSpec(nu=2.0)


class TestFit:
    def test_interpolates_two_points(self):
        ds = TrajectoryDataset(np.array([[0.0], [1.0]]), np.array([[0.3], [-0.2]]))
        m = fit(ds, seed=1, options=FitOptions(restarts=3, max_iter=100))
        mu, sd = m.predict(np.array([[0.0], [1.0]]))
        assert np.abs(mu[:, 0] - [0.3, -0.2]).max() < 1e-6

    def test_deterministic_under_seed(self):
        ds = TrajectoryDataset(
            np.linspace(0, 1, 12)[:, None], np.sin(np.linspace(0, 6, 12))[:, None]
        )
        m1 = fit(ds, seed=7, options=FitOptions(restarts=4))
        m2 = fit(ds, seed=7, options=FitOptions(restarts=4))
        assert np.array_equal(m1.lengthscales, m2.lengthscales)
        assert m1.outputs[0].noise_rel2 == m2.outputs[0].noise_rel2

    def test_lengthscale_recovery_within_factor_two(self):
        rng = np.random.default_rng(42)
        X = rng.uniform(0, 3, (80, 1))
        true = KernelSpec(nu=2.5, lengthscales=np.array([0.5]))
        K = kernel_matrix(true, X, X) + 1e-10 * np.eye(80)
        y = np.linalg.cholesky(K) @ rng.standard_normal(80)
        m = fit(TrajectoryDataset(X, y[:, None]), KernelSpec(nu=2.5),
                FitOptions(restarts=6), seed=3)
        ell = m.lengthscales[0, 0]
        assert 0.25 <= ell <= 1.0

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit(TrajectoryDataset(np.array([[0.0]]), np.array([[1.0]])))

    def test_degenerate_duplicates_reported(self):
        X = np.array([[0.0], [0.0], [1.0]])
        Y = np.array([[0.0], [5.0], [1.0]])
        with pytest.raises(FitError, match="degenerate"):
            fit(TrajectoryDataset(X, Y), seed=0)

    def test_ascent_beats_every_start(self):
        m = toy_model(seed=5)
        for ell, out in enumerate(m.outputs):
            assert out.log_likelihood >= max(m.start_log_likelihoods[ell]) - 1e-9


class TestPredict:
    def test_training_points_reproduced(self):
        # posterior at floor noise interpolates GP-drawn data; the defect is
        # bounded by the noise floor times the weight norm
        from gpmorse.gp import GpSurrogate, OutputGp

        rng = np.random.default_rng(42)
        X = rng.uniform(0, 3, (10, 2))
        truth = KernelSpec(nu=2.5, lengthscales=np.array([0.8, 0.8]))
        K = kernel_matrix(truth, X, X) + 1e-12 * np.eye(10)
        Y = np.linalg.cholesky(K) @ rng.standard_normal((10, 2))
        outs = [OutputGp(truth, 1e-8, X, np.ascontiguousarray(Y[:, l])) for l in range(2)]
        m = GpSurrogate(X, outs, None)
        mu, sd = m.predict(X)
        assert np.abs(mu - Y).max() < 1e-6
        for ell, out in enumerate(m.outputs):
            assert sd[:, ell].max() <= 1e-3 * np.sqrt(out.sigma2)

    def test_prior_reversion_far_from_data(self):
        m = toy_model(seed=3)
        mu, sd = m.predict(np.array([[500.0, 500.0]]))
        assert np.abs(mu).max() < 1e-6  # zero-mean prior
        for ell, out in enumerate(m.outputs):
            assert sd[0, ell] == pytest.approx(np.sqrt(out.sigma2), rel=1e-6)

    def test_matches_naive_oracle(self):
        # noise floor keeps the system well-conditioned so the two solve
        # paths agree to tight tolerance
        rng = np.random.default_rng(4)
        m = toy_model(seed=4, floor=1e-4)
        Xq = rng.uniform(-2, 2, (100, 2))
        mu, sd = m.predict(Xq)
        mu_ref, sd_ref = naive_predict(m, Xq)
        assert np.abs(mu - mu_ref).max() < 1e-8
        assert np.abs(sd - sd_ref).max() < 1e-8

    def test_rejects_nonfinite(self):
        m = toy_model()
        with pytest.raises(ValueError):
            m.predict(np.array([[np.nan, 0.0]]))


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(9)
        X = np.stack([rng.uniform(-np.pi, np.pi, 25), rng.uniform(-3, 3, 25)], 1)
        y = np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2
        periods = np.array([2 * np.pi, 0.0])
        for nu in (1.5, 2.5):
            for _ in range(10):
                p = np.concatenate(
                    [rng.uniform(np.log(0.2), np.log(2.0), 2),
                     [rng.uniform(np.log(1e-3), np.log(0.3))]]
                )
                _, g = profiled_log_likelihood(X, y, nu, periods, p[:2], p[2])
                for k in range(3):
                    e = np.zeros(3)
                    e[k] = 1e-6
                    lp, _ = profiled_log_likelihood(X, y, nu, periods, (p + e)[:2], (p + e)[2])
                    lm, _ = profiled_log_likelihood(X, y, nu, periods, (p - e)[:2], (p - e)[2])
                    fd = (lp - lm) / 2e-6
                    assert abs(fd - g[k]) <= 1e-4 * max(abs(fd), 1.0)


class TestConfidence:
    def test_one_dim_matches_normal_table(self):
        # alpha equals delta when M = 1
        assert confidence_z(0.05, 1) == pytest.approx(1.95996, abs=1e-5)

    def test_two_dim_value(self):
        alpha = 1.0 - (1.0 - 0.05) ** 0.5
        assert alpha == pytest.approx(0.0253205655, abs=1e-9)
        assert confidence_z(0.05, 2) == pytest.approx(2.2364766, abs=1e-6)

    def test_zero_sigma_degenerate_box(self):
        # halfwidth is exactly z * sigma, so vanishing deviation collapses
        # the box to the mean point
        m = toy_model(seed=2, noise=0.0, floor=1e-8)
        x = m.X[0]
        mu, sd = m.predict(x)
        box = m.confidence_hypercube(x, 0.5)
        from gpmorse.gp import confidence_z
        z = confidence_z(0.5, m.dim)
        assert np.allclose(box.upper - box.lower, 2 * z * sd)
        assert np.all(box.upper - box.lower <= 1e-3)

    def test_monotone_nesting(self):
        m = toy_model(seed=6)
        rng = np.random.default_rng(8)
        for _ in range(50):
            x = rng.uniform(-2, 2, 2)
            inner = m.confidence_hypercube(x, 0.875)
            outer = m.confidence_hypercube(x, 0.05)
            assert np.all(outer.lower <= inner.lower + 1e-12)
            assert np.all(outer.upper >= inner.upper - 1e-12)

    def test_delta_bounds(self):
        m = toy_model()
        with pytest.raises(ValueError):
            m.confidence_hypercube(m.X[0], 0.0)
        with pytest.raises(ValueError):
            m.confidence_hypercube(m.X[0], 1.0)


class TestSerialization:
    def test_roundtrip_byte_identical(self, tmp_path):
        m = toy_model(seed=11)
        p1, p2 = tmp_path / "m1.txt", tmp_path / "m2.txt"
        m.save(p1)
        back = GpSurrogate.load(p1)
        back.save(p2)
        assert p1.read_text() == p2.read_text()

    def test_loaded_model_predicts_identically(self, tmp_path):
        m = toy_model(seed=12)
        p = tmp_path / "m.txt"
        m.save(p)
        back = GpSurrogate.load(p)
        Xq = np.random.default_rng(1).uniform(-2, 2, (20, 2))
        mu1, sd1 = m.predict(Xq)
        mu2, sd2 = back.predict(Xq)
        assert np.array_equal(mu1, mu2) and np.array_equal(sd1, sd2)

    def test_with_data_keeps_kernels(self):
        m = toy_model(seed=13)
        rng = np.random.default_rng(2)
        X2 = rng.uniform(-2, 2, (10, 2))
        Y2 = np.stack([np.sin(X2[:, 0]) * np.cos(X2[:, 1]), 0.5 * X2[:, 0]], 1)
        ds = TrajectoryDataset(np.vstack([m.X, X2]),
                               np.vstack([np.stack([o.y for o in m.outputs], 1), Y2]))
        m2 = m.with_data(ds)
        assert m2.n_train == m.n_train + 10
        assert np.array_equal(m2.lengthscales, m.lengthscales)


class TestPeriodicTargets:
    def test_outputs_unwrapped_near_inputs(self):
        # pairs near the seam train on the continuous representative
        periods = np.array([2 * np.pi])
        X = np.array([[3.0], [-3.0], [0.0], [1.0], [2.0], [-1.5]])
        # true map: rotate by +0.4 (wrapped samples as a sensor would report)
        raw = X[:, 0] + 0.4
        wrapped = np.mod(raw + np.pi, 2 * np.pi) - np.pi
        ds = TrajectoryDataset(X, wrapped[:, None])
        m = fit(ds, KernelSpec(nu=2.5, periods=periods),
                FitOptions(restarts=4), seed=0)
        mu, _ = m.predict(np.array([[3.1]]))
        # prediction stays near the input's representative, not the wrapped one
        assert abs(mu[0, 0] - 3.5) < 0.2
