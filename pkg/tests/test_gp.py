import math

import numpy as np
import pytest
import scipy.linalg

from pai.gp import (
    BoundingStats,
    FitConfig,
    GPHyperparams,
    GPSurrogate,
    KernelParams,
    MeanParams,
    TrainingSet,
    bounding_stats,
    gp_fit,
    gp_posterior,
    hyperprior_logpdf,
    kernel_eval,
    kernel_matrix,
    map_objective,
    mean_eval,
    smoothbox_logpdf,
    surrogate_from_record,
    surrogate_to_record,
)


def make_hyper(D=2, sf2=1.0, ell=1.0, m0=0.0, mu=0.0, om=1.0, noise=1e-3):
    return GPHyperparams(
        kernel=KernelParams(sf2, np.full(D, ell)),
        mean=MeanParams(m0, np.full(D, mu), np.full(D, om)),
        noise_variance=noise,
    )


class TestKernel:
    def test_zero_distance_gives_output_scale(self):
        k = KernelParams(2.5, np.array([0.3, 4.0]))
        x = np.array([1.0, -2.0])
        assert kernel_eval(x, x, k) == pytest.approx(2.5)

    def test_hand_evaluation(self):
        k = KernelParams(1.0, np.array([1.0, 1.0]))
        v = kernel_eval(np.array([1.0, 0.0]), np.array([0.0, 0.0]), k)
        assert v == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert v == pytest.approx(0.606531, abs=1e-6)

    def test_decay_to_zero(self):
        k = KernelParams(1.0, np.array([1.0]))
        assert kernel_eval(np.array([1e4]), np.array([0.0]), k) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        k = KernelParams(1.7, rng.uniform(0.1, 2.0, size=3))
        for _ in range(20):
            a, b = rng.normal(size=3), rng.normal(size=3)
            assert kernel_eval(a, b, k) == pytest.approx(kernel_eval(b, a, k), rel=1e-15)

    def test_nonfinite_point_rejected(self):
        k = KernelParams(1.0, np.array([1.0]))
        with pytest.raises(ValueError, match="invalid point"):
            kernel_eval(np.array([np.nan]), np.array([0.0]), k)

    def test_gram_psd_with_noise(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            X = rng.normal(size=(30, 2))
            k = KernelParams(
                float(rng.uniform(0.1, 10.0)), rng.uniform(0.05, 3.0, size=2)
            )
            A = kernel_matrix(X, X, k) + 1e-3 * np.eye(30)
            scipy.linalg.cholesky(A, lower=True)  # must not raise


class TestMean:
    def test_maximum_at_location(self):
        m = MeanParams(3.5, np.array([1.0, -1.0]), np.array([2.0, 0.5]))
        assert mean_eval(m.location, m) == pytest.approx(3.5)

    def test_hand_evaluation(self):
        m = MeanParams(0.0, np.zeros(2), np.ones(2))
        assert mean_eval(np.array([1.0, 0.0]), m) == pytest.approx(-0.5)

    def test_even_symmetry(self):
        rng = np.random.default_rng(1)
        m = MeanParams(1.0, rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
        for _ in range(10):
            d = rng.normal(size=2)
            assert mean_eval(m.location + d, m) == pytest.approx(
                mean_eval(m.location - d, m), rel=1e-12
            )


class TestSmoothBox:
    def test_tail_matches_plateau_times_gaussian_decay(self):
        a, b, sig = -1.0, 2.0, 0.5
        plateau = smoothbox_logpdf(0.0, a, b, sig)
        tail = smoothbox_logpdf(a - 3 * sig, a, b, sig)
        assert tail == pytest.approx(plateau - 4.5, abs=1e-12)

    def test_normalization(self):
        from scipy.integrate import quad

        a, b, sig = -0.3, 1.2, 0.7
        total, _ = quad(lambda x: math.exp(smoothbox_logpdf(x, a, b, sig)), -10, 12)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_midpoint_beats_far_tail(self):
        stats = BoundingStats(
            box_lo=np.zeros(1), box_hi=np.ones(1), lengths=np.ones(1), y_min=-4.0, y_max=2.0
        )
        mid = make_hyper(D=1, m0=-1.0)
        far = make_hyper(D=1, m0=12.0)
        assert hyperprior_logpdf(mid, stats) > hyperprior_logpdf(far, stats)


class TestHyperprior:
    def test_lengthscale_prior_mode(self):
        stats = BoundingStats(
            box_lo=np.zeros(2),
            box_hi=np.array([3.0, 1.0]),
            lengths=np.array([3.0, 1.0]),
            y_min=0.0,
            y_max=1.0,
        )
        loc = np.sqrt(2 / 6.0) * stats.lengths
        at_mode = make_hyper(m0=0.5, mu=0.5)
        at_mode = GPHyperparams(
            kernel=KernelParams(1.0, loc.copy()),
            mean=MeanParams(0.5, np.array([0.5, 0.5]), loc.copy()),
        )
        base = hyperprior_logpdf(at_mode, stats)
        for factor in (0.5, 0.9, 1.1, 2.0):
            perturbed = GPHyperparams(
                kernel=KernelParams(1.0, loc * factor),
                mean=at_mode.mean,
            )
            assert hyperprior_logpdf(perturbed, stats) < base

    def test_flat_in_output_scale(self):
        stats = bounding_stats(TrainingSet(np.random.default_rng(0).normal(size=(5, 2)), np.zeros(5)))
        a = make_hyper(sf2=0.01, m0=-0.1, mu=0.0)
        b = make_hyper(sf2=100.0, m0=-0.1, mu=0.0)
        assert hyperprior_logpdf(a, stats) == pytest.approx(hyperprior_logpdf(b, stats))


class TestPosterior:
    def test_empty_set_reverts_to_prior(self):
        hyper = make_hyper(sf2=2.0, m0=1.5)
        g = GPSurrogate.from_hyper(TrainingSet(np.empty((0, 2)), np.empty(0)), hyper)
        x = np.array([0.3, -0.7])
        mean, var = gp_posterior(g, x)
        assert mean == pytest.approx(mean_eval(x, hyper.mean))
        assert var == pytest.approx(2.0)

    def test_matches_direct_solve_on_three_points(self):
        X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        y = np.array([0.5, -0.2, 0.1])
        hyper = make_hyper()
        g = GPSurrogate.from_hyper(TrainingSet(X, y), hyper)
        xq = np.array([0.4, 0.4])
        # independent dense solve of the closed-form posterior
        K = kernel_matrix(X, X, hyper.kernel) + 1e-3 * np.eye(3)
        kq = kernel_matrix(X, xq[None, :], hyper.kernel)[:, 0]
        r = y - np.array([mean_eval(row, hyper.mean) for row in X])
        sol = np.linalg.solve(K, r)
        want_mean = mean_eval(xq, hyper.mean) + kq @ sol
        want_var = 1.0 - kq @ np.linalg.solve(K, kq)
        mean, var = gp_posterior(g, xq)
        assert mean == pytest.approx(want_mean, abs=1e-10)
        assert var == pytest.approx(want_var, abs=1e-10)
        # interpolation near observed target at a training input
        m_at, _ = gp_posterior(g, X[0])
        assert abs(m_at - y[0]) < 0.05

    def test_prior_reversion_far_away(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(12, 2))
        y = rng.normal(size=12)
        hyper = make_hyper(sf2=3.0, ell=0.8, m0=0.2)
        g = GPSurrogate.from_hyper(TrainingSet(X, y), hyper)
        far = np.array([60.0, -55.0])
        mean, var = gp_posterior(g, far)
        assert abs(mean - mean_eval(far, hyper.mean)) < 1e-6
        assert abs(var - 3.0) < 1e-6 * 3.0

    def test_predictive_consistency_after_adding_point(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(-2, 2, size=(25, 2))
        y = np.sin(X[:, 0]) + np.cos(X[:, 1])
        hyper = make_hyper(ell=1.2)
        new_x = np.array([0.123, -0.456])
        new_y = 0.8
        train, keep = TrainingSet(X, y).added(new_x[None, :], np.array([new_y]))
        assert keep.all()
        g = GPSurrogate.from_hyper(train, hyper)
        K = kernel_matrix(train.inputs, train.inputs, hyper.kernel) + 1e-3 * np.eye(26)
        if np.linalg.cond(K) < 1e8:
            mean, _ = gp_posterior(g, new_x)
            assert abs(mean - new_y) <= 3 * math.sqrt(1e-3)

    def test_duplicate_rejected(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        ts = TrainingSet(X, np.array([0.0, 1.0]))
        new, keep = ts.added(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([5.0, 6.0]))
        assert list(keep) == [False, True]
        assert len(new) == 3
        with pytest.raises(ValueError, match="duplicate"):
            TrainingSet(np.array([[0.0, 0.0], [0.0, 0.0]]), np.array([0.0, 0.0]))


class TestFit:
    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(-1, 1, size=(15, 2))
        y = -0.5 * np.sum(X**2, axis=1)
        a = gp_fit(TrainingSet(X, y), seed=42)
        b = gp_fit(TrainingSet(X, y), seed=42)
        assert np.array_equal(a.hyper.as_vector(), b.hyper.as_vector())

    def test_recovers_negative_quadratic(self):
        rng = np.random.default_rng(13)
        X = rng.uniform(-2, 2, size=(20, 2))
        true_mean = MeanParams(1.2, np.array([0.3, -0.4]), np.array([1.1, 0.7]))
        y = np.array([mean_eval(row, true_mean) for row in X])
        g = gp_fit(TrainingSet(X, y), seed=1)
        Xq = rng.uniform(-1.8, 1.8, size=(30, 2))
        want = np.array([mean_eval(row, true_mean) for row in Xq])
        got, _ = g.predict(Xq)
        assert np.max(np.abs(got - want)) < 1e-3

    def test_ascent_over_initializations(self):
        rng = np.random.default_rng(17)
        X = rng.uniform(-1, 1, size=(12, 2))
        y = np.sin(2 * X[:, 0]) * np.cos(X[:, 1])
        train = TrainingSet(X, y)
        from pai.gp import _initial_points, bounding_stats

        stats = bounding_stats(train)
        cfg = FitConfig()
        g = gp_fit(train, cfg, seed=5)
        from pai.gp import _pack

        best = map_objective(_pack(g.hyper), X, y, stats, cfg.noise_variance)[0]
        from pai._seeding import rng as derive

        for z0 in _initial_points(train, stats, cfg, derive(5, 0x6F17)):
            v0 = map_objective(z0, X, y, stats, cfg.noise_variance)[0]
            assert best >= v0 - 1e-9

    def test_refit_consistency(self):
        rng = np.random.default_rng(23)
        X = rng.uniform(-1, 1, size=(10, 2))
        y = rng.normal(size=10)
        g = gp_fit(TrainingSet(X, y), seed=3)
        rebuilt = GPSurrogate.from_hyper(g.train, g.hyper)
        Xq = rng.uniform(-1, 1, size=(20, 2))
        m1, v1 = g.predict(Xq)
        m2, v2 = rebuilt.predict(Xq)
        assert np.max(np.abs(m1 - m2)) < 1e-8
        assert np.max(np.abs(v1 - v2)) < 1e-8


class TestGradient:
    def test_analytic_matches_central_differences(self):
        rng = np.random.default_rng(29)
        X = rng.uniform(-1.5, 1.5, size=(14, 2))
        y = np.sin(X[:, 0]) - 0.3 * X[:, 1] ** 2
        train = TrainingSet(X, y)
        stats = bounding_stats(train)
        D = 2
        n_checked = 0
        while n_checked < 10:
            z = np.concatenate(
                [
                    rng.normal(0.0, 1.0, size=1),
                    rng.normal(-0.5, 0.7, size=D),
                    rng.uniform(stats.y_min + 0.05, stats.y_max - 0.05, size=1),
                    rng.uniform(stats.box_lo + 0.05, stats.box_hi - 0.05),
                    rng.normal(0.0, 0.7, size=D),
                ]
            )
            val, grad = map_objective(z, X, y, stats, 1e-3)
            if not np.isfinite(val):
                continue
            h = 1e-5
            fd = np.zeros_like(z)
            for i in range(z.size):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd[i] = (
                    map_objective(zp, X, y, stats, 1e-3)[0]
                    - map_objective(zm, X, y, stats, 1e-3)[0]
                ) / (2 * h)
            scale = np.maximum(np.abs(fd), np.maximum(np.abs(grad), 1e-3))
            assert np.max(np.abs(grad - fd) / scale) < 1e-4
            n_checked += 1


class TestSerialization:
    def test_round_trip_preserves_predictions(self):
        rng = np.random.default_rng(31)
        X = rng.uniform(-1, 1, size=(8, 2))
        y = rng.normal(size=8)
        g = gp_fit(TrainingSet(X, y), seed=9)
        g2 = surrogate_from_record(surrogate_to_record(g))
        Xq = rng.uniform(-1, 1, size=(9, 2))
        assert np.array_equal(g.predict(Xq)[0], g2.predict(Xq)[0])

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="format"):
            surrogate_from_record({"format": "bogus"})
