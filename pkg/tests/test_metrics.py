import itertools
import math

import numpy as np
import pytest
import scipy.optimize
import scipy.stats

from pai.metrics import bootstrap_compare, compute_report, gskl, mmtv, mmtv_per_dim, w2


def standardize(x):
    """Exact zero mean, unit (ddof=1) variance per column."""
    x = np.asarray(x, dtype=float)
    return (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)


class TestMmtv:
    def test_identical_sets_zero(self):
        x = np.random.default_rng(0).normal(size=(500, 2))
        assert mmtv(x, x.copy()) == 0.0

    def test_disjoint_supports_one(self):
        p = np.random.default_rng(1).uniform(0, 1, size=(400, 1))
        q = np.random.default_rng(2).uniform(2, 3, size=(400, 1))
        assert mmtv(p, q) == pytest.approx(1.0)

    def test_gaussian_offset_analytic(self):
        rng = np.random.default_rng(3)
        p = rng.normal(0.0, 1.0, size=(100_000, 1))
        q = rng.normal(2.0, 1.0, size=(100_000, 1))
        want = 2 * scipy.stats.norm.cdf(1.0) - 1.0
        assert mmtv(p, q, n_bins=100) == pytest.approx(want, abs=0.02)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=(300, 2))
        q = rng.normal(1.0, 2.0, size=(400, 2))
        assert mmtv(p, q) == mmtv(q, p)

    def test_per_dim_terms(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(1000, 2))
        q = np.column_stack([p[:, 0], p[:, 1] + 10.0])
        terms = mmtv_per_dim(p, q)
        assert terms[0] < 0.2 and terms[1] > 0.9


def lp_assignment_cost(cost):
    """Assignment optimum via the LP relaxation (integral by unimodularity)."""
    n = cost.shape[0]
    A_eq = []
    for i in range(n):
        row = np.zeros(n * n)
        row[i * n : (i + 1) * n] = 1.0
        A_eq.append(row)
    for j in range(n):
        row = np.zeros(n * n)
        row[j::n] = 1.0
        A_eq.append(row)
    res = scipy.optimize.linprog(
        cost.ravel(), A_eq=np.array(A_eq), b_eq=np.ones(2 * n), bounds=(0, 1), method="highs"
    )
    assert res.success
    return res.fun


class TestW2:
    def test_identical_zero(self):
        x = np.random.default_rng(0).normal(size=(100, 2))
        assert w2(x, x.copy()) == 0.0

    def test_single_pair_euclidean(self):
        assert w2(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(5.0)

    def test_exhaustive_oracle_small(self):
        rng = np.random.default_rng(7)
        P = rng.normal(size=(7, 2))
        Q = rng.normal(size=(7, 2))
        cost = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=2)
        best = min(
            sum(cost[i, p[i]] for i in range(7)) for p in itertools.permutations(range(7))
        )
        assert w2(P, Q) == pytest.approx(math.sqrt(best / 7), rel=1e-12)

    def test_lp_oracle_64_points(self):
        rng = np.random.default_rng(8)
        P = rng.normal(size=(64, 2))
        Q = rng.normal(1.0, 1.5, size=(64, 2))
        cost = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=2)
        want = math.sqrt(lp_assignment_cost(cost) / 64)
        assert w2(P, Q) == pytest.approx(want, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        P = rng.normal(size=(40, 2))
        Q = rng.normal(size=(40, 2))
        perm = rng.permutation(40)
        assert w2(P, Q) == pytest.approx(w2(P[perm], Q), rel=1e-12)
        assert w2(P, Q) == pytest.approx(w2(Q, P), rel=1e-12)

    def test_subsampling_cap_deterministic(self):
        rng = np.random.default_rng(10)
        P = rng.normal(size=(2000, 2))
        Q = rng.normal(size=(1500, 2))
        a = w2(P, Q, max_n=128, seed=5)
        b = w2(P, Q, max_n=128, seed=5)
        assert a == b


class TestGskl:
    def test_identical_zero(self):
        x = np.random.default_rng(0).normal(size=(300, 2))
        assert gskl(x, x.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_mean_gap_sqrt2_gives_one(self):
        z = standardize(np.random.default_rng(1).normal(size=(400, 1)))
        assert gskl(z, z + math.sqrt(2.0)) == pytest.approx(1.0, abs=1e-9)

    def test_mean_gap_half_gives_eighth(self):
        z = standardize(np.random.default_rng(2).normal(size=(400, 1)))
        assert gskl(z, z + 0.5) == pytest.approx(1.0 / 8.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=(200, 2))
        q = rng.normal(0.5, 2.0, size=(300, 2))
        assert gskl(p, q) == pytest.approx(gskl(q, p), rel=1e-12)

    def test_quadrature_oracle_1d(self):
        rng = np.random.default_rng(4)
        p = rng.normal(0.3, 1.2, size=(5000, 1))
        q = rng.normal(-0.5, 0.7, size=(5000, 1))
        mp, sp = p.mean(), p.std(ddof=1)
        mq, sq = q.mean(), q.std(ddof=1)
        from scipy.integrate import quad

        def kl(m0, s0, m1, s1):
            f = lambda x: scipy.stats.norm.pdf(x, m0, s0) * (
                scipy.stats.norm.logpdf(x, m0, s0) - scipy.stats.norm.logpdf(x, m1, s1)
            )
            return quad(f, -15, 15, limit=200)[0]

        want = 0.5 * (kl(mp, sp, mq, sq) + kl(mq, sq, mp, sp))
        assert gskl(p, q) == pytest.approx(want, abs=1e-6)

    def test_singular_covariance_raises(self):
        x = np.ones((10, 2))
        x[:, 1] = 2.0
        with pytest.raises(ValueError, match="singular"):
            gskl(x, np.random.default_rng(0).normal(size=(10, 2)))


class TestBootstrapCompare:
    def test_identical_runs_all_tied(self):
        runs = {m: [0.5, 0.5, 0.5] for m in ("a", "b", "c")}
        assert bootstrap_compare(runs, n_boot=500, seed=0) == {"a", "b", "c"}

    def test_separated_excluded(self):
        runs = {"a": [0.0] * 10, "b": [1.0] * 10}
        assert bootstrap_compare(runs, n_boot=500, alpha=0.5, seed=0) == {"a"}

    def test_calibration(self):
        rng = np.random.default_rng(11)
        ties = 0
        reps = 100
        for r in range(reps):
            a = rng.normal(size=10).tolist()
            b = rng.normal(size=10).tolist()
            out = bootstrap_compare({"a": a, "b": b}, n_boot=2000, alpha=0.05, seed=r)
            ties += len(out) == 2
        assert ties / reps == pytest.approx(0.95, abs=0.1)

    def test_requires_two_runs(self):
        with pytest.raises(ValueError):
            bootstrap_compare({"a": [1.0], "b": [1.0, 2.0]})


class TestComputeReport:
    def test_fields_consistent(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(500, 2))
        b = rng.normal(0.2, 1.0, size=(800, 2))
        rep = compute_report(a, b, seed=3)
        assert rep.mmtv == pytest.approx(np.mean(rep.mmtv_per_dim))
        assert rep.mmtv == pytest.approx(mmtv(a, b))
        assert rep.w2 == pytest.approx(w2(a, b, seed=3))
        assert rep.gskl == pytest.approx(gskl(a, b))
        assert 0.0 <= rep.mmtv <= 1.0
