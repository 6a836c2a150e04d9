"""Acquisition-driven point selection for log-density surrogates.

Implements the interquantile-range acquisition (exp(mean) * sinh(u * sd)),
greedy batch selection with variance-only fantasy conditioning, k-medoids
seeding, active subsampling from stored MCMC draws, and continuous
acquisition optimization over an expanding search domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.stats.qmc

from ._seeding import rng as _derive_rng
from ._seeding import seed_sequence
from .gp import DUPLICATE_TOL, FitConfig, GPSurrogate, TrainingSet, gp_fit, gp_posterior, kernel_matrix
from .sampling import SampleSet

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class AcquisitionConfig:
    """Exploration weight and selection budgets (defaults scale with D)."""

    u: float = 20.0
    n_batch: int | None = None  # D
    t_subsample: int = 25
    t_refine: int = 25
    n_med: int | None = None  # 20 * (D + 2)

    def resolved(self, dim: int) -> "AcquisitionConfig":
        return replace(
            self,
            n_batch=self.n_batch if self.n_batch is not None else dim,
            n_med=self.n_med if self.n_med is not None else 20 * (dim + 2),
        )


@dataclass(frozen=True)
class SearchDomain:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        if not np.all(self.lo < self.hi):
            raise ValueError("domain must satisfy lo < hi elementwise")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    @staticmethod
    def from_points(points: np.ndarray, margin: float = 0.1) -> "SearchDomain":
        """Bounding box of a point set plus a proportional margin."""
        points = np.atleast_2d(points)
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        return SearchDomain(lo - 0.5 * margin * span, hi + 0.5 * margin * span)

    def union(self, other: "SearchDomain") -> "SearchDomain":
        return SearchDomain(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)


# ---------------------------------------------------------------------------
# acquisition values
# ---------------------------------------------------------------------------


def maxiqr(theta: np.ndarray, g: GPSurrogate, u: float) -> float:
    """Interquantile-range acquisition exp(m) * sinh(u * s) at one point."""
    m, var = gp_posterior(g, np.asarray(theta, dtype=float))
    return math.exp(m) * math.sinh(u * math.sqrt(var))


def log_sinh(z: np.ndarray) -> np.ndarray:
    """log(sinh(z)) for z >= 0, stable for large z; -inf at z = 0."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        small = np.log(np.sinh(np.minimum(z, 20.0)))
        large = z - LOG2 + np.log1p(-np.exp(-2.0 * z))
    return np.where(z < 20.0, small, large)


def log_maxiqr_values(means: np.ndarray, variances: np.ndarray, u: float) -> np.ndarray:
    return means + log_sinh(u * np.sqrt(np.maximum(variances, 0.0)))


def _argmax_lex(values: np.ndarray, points: np.ndarray) -> int:
    """Argmax with lexicographic tie-break on the point coordinates."""
    best = np.max(values)
    tied = np.flatnonzero(values == best)
    if tied.size == 1:
        return int(tied[0])
    order = np.lexsort(points[tied].T[::-1])
    return int(tied[order[0]])


# ---------------------------------------------------------------------------
# greedy batch selection over a finite candidate pool
# ---------------------------------------------------------------------------


def _predict_full(g: GPSurrogate, X: np.ndarray):
    """(mean, latent var, whitened cross-cov) sharing one kernel pass."""
    X = np.atleast_2d(X)
    from .gp import mean_vector

    mu = mean_vector(X, g.hyper.mean)
    if len(g.train) == 0:
        return mu, np.full(X.shape[0], g.hyper.kernel.output_scale_sq), np.zeros((0, X.shape[0]))
    Kxq = kernel_matrix(g.train.inputs, X, g.hyper.kernel)
    mean = mu + Kxq.T @ g.alpha
    W = scipy.linalg.solve_triangular(g.chol, Kxq, lower=True, check_finite=False)
    var = np.maximum(g.hyper.kernel.output_scale_sq - np.sum(W * W, axis=0), 0.0)
    return mean, var, W


def select_batch(
    g: GPSurrogate, candidates: np.ndarray, n_batch: int, u: float
) -> np.ndarray:
    """Greedy acquisition picks from a candidate pool.

    The first pick is the exact acquisition argmax; after each pick the
    latent variance of the remaining pool is conditioned on a pending
    observation at the picked point (posterior mean unchanged).
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("empty candidate pool")
    n_pick = min(n_batch, candidates.shape[0])
    means, var0, W = _predict_full(g, candidates)
    var_res = var0.copy()
    noise = g.hyper.noise_variance
    picks: list[int] = []
    e_hist: list[np.ndarray] = []
    taken = np.zeros(candidates.shape[0], dtype=bool)
    for _ in range(n_pick):
        logacq = log_maxiqr_values(means, var_res, u)
        free = np.flatnonzero(~taken)
        idx = int(free[_argmax_lex(logacq[free], candidates[free])])
        picks.append(idx)
        taken[idx] = True
        if len(picks) == n_pick:
            break
        # covariance of the pool with the pick, under current conditioning
        kc = kernel_matrix(candidates, candidates[idx][None, :], g.hyper.kernel)[:, 0]
        c = kc - W.T @ W[:, idx] if W.size else kc
        for e in e_hist:
            c = c - e * e[idx]
        denom = var_res[idx] + noise
        e_new = c / math.sqrt(denom)
        var_res = np.maximum(var_res - e_new**2, 0.0)
        e_hist.append(e_new)
    return np.asarray(picks, dtype=int)


# ---------------------------------------------------------------------------
# k-medoids
# ---------------------------------------------------------------------------


def _pairwise_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.sqrt(np.maximum(sq, 0.0))


def kmedoids_subset(points: np.ndarray, n_med: int, seed) -> np.ndarray:
    """Indices of k medoids (alternate/swap style, Euclidean distance).

    Distance-proportional seeding followed by assign/update sweeps; the
    within-cluster distance objective never increases across sweeps.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    S = points.shape[0]
    if n_med >= S:
        return np.arange(S)
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _derive_rng(*keys, 0x3ED5)

    medoids = np.empty(n_med, dtype=int)
    medoids[0] = rng.integers(S)
    d2 = np.sum((points - points[medoids[0]]) ** 2, axis=1)
    for i in range(1, n_med):
        total = d2.sum()
        if total <= 0.0:
            # pool of duplicates: fall back to first unused indices
            unused = np.setdiff1d(np.arange(S), medoids[:i], assume_unique=False)
            medoids[i:] = unused[: n_med - i]
            break
        medoids[i] = rng.choice(S, p=d2 / total)
        d2 = np.minimum(d2, np.sum((points - points[medoids[i]]) ** 2, axis=1))

    for _ in range(100):
        dist = _pairwise_dist(points, points[medoids])
        labels = np.argmin(dist, axis=1)
        new_medoids = medoids.copy()
        for j in range(n_med):
            members = np.flatnonzero(labels == j)
            if members.size == 0:
                continue
            sub = _pairwise_dist(points[members], points[members])
            new_medoids[j] = members[int(np.argmin(sub.sum(axis=1)))]
        if np.array_equal(new_medoids, medoids):
            break
        medoids = new_medoids
    return np.sort(medoids)


def kmedoids_objective(points: np.ndarray, medoid_idx: np.ndarray) -> float:
    dist = _pairwise_dist(np.atleast_2d(points), np.atleast_2d(points)[medoid_idx])
    return float(dist.min(axis=1).sum())


# ---------------------------------------------------------------------------
# active subsampling from stored MCMC output
# ---------------------------------------------------------------------------


def active_subsample(
    samples: SampleSet,
    cfg: AcquisitionConfig,
    fit_cfg: FitConfig,
    seed,
    refit_restarts: int = 1,
) -> tuple[TrainingSet, GPSurrogate]:
    """Select a GP training subset from MCMC draws using stored densities.

    k-medoids seeds the set; each of t_subsample iterations adds a greedy
    acquisition batch from the remaining pool and refits the GP. The true
    target is never evaluated here.
    """
    cfg = cfg.resolved(samples.dim)
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    pool = samples.points
    ys = samples.log_densities

    med = kmedoids_subset(pool, cfg.n_med, keys)
    train, _ = TrainingSet(np.empty((0, samples.dim)), np.empty(0)).added(pool[med], ys[med])

    avail = np.ones(pool.shape[0], dtype=bool)
    avail &= ~_near_training(pool, train.inputs)
    seed_int = seed_sequence(*keys, 0xF17).generate_state(1)[0]
    g = gp_fit(train, fit_cfg, seed=seed_int)
    for t in range(cfg.t_subsample):
        cand_idx = np.flatnonzero(avail)
        if cand_idx.size == 0:
            break
        picks = select_batch(g, pool[cand_idx], cfg.n_batch, cfg.u)
        chosen = cand_idx[picks]
        train, _ = train.added(pool[chosen], ys[chosen])
        avail[chosen] = False
        still = np.flatnonzero(avail)
        near = _near_training(pool[still], pool[chosen])
        avail[still[near]] = False
        g = gp_fit(
            train,
            fit_cfg.with_warm_start(g.hyper, refit_restarts),
            seed=seed_sequence(*keys, 0xF17, t + 1).generate_state(1)[0],
        )
    return train, g


def _near_training(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Mask of points within duplicate tolerance (max-norm) of any ref row."""
    if ref.shape[0] == 0 or points.shape[0] == 0:
        return np.zeros(points.shape[0], dtype=bool)
    out = np.zeros(points.shape[0], dtype=bool)
    chunk = max(1, int(5e6 // max(ref.shape[0], 1)))
    for s in range(0, points.shape[0], chunk):
        e = min(s + chunk, points.shape[0])
        d = np.max(np.abs(points[s:e, None, :] - ref[None, :, :]), axis=2)
        out[s:e] = np.min(d, axis=1) <= DUPLICATE_TOL
    return out


# ---------------------------------------------------------------------------
# continuous acquisition optimization
# ---------------------------------------------------------------------------


class _PendingConditioner:
    """Sequential variance conditioning on pending (not yet observed) points."""

    def __init__(self, g: GPSurrogate, pending: list[np.ndarray]):
        self.g = g
        self.pending = [np.asarray(p, dtype=float) for p in pending]
        self.denoms: list[float] = []
        self.e_at_pending: list[np.ndarray] = []  # e_l evaluated at all pendings
        if not self.pending:
            self._P = None
            self._Wp = None
            return
        P = np.vstack(self.pending)
        _, var_P, Wp = _predict_full(g, P)
        K = kernel_matrix(P, P, g.hyper.kernel)
        C = K - Wp.T @ Wp if Wp.size else K
        noise = g.hyper.noise_variance
        for l in range(P.shape[0]):
            c_l = C[:, l].copy()
            v_l = C[l, l]
            for m, e_m in enumerate(self.e_at_pending):
                c_l = c_l - e_m * e_m[l]
                v_l -= e_m[l] ** 2
            denom = max(v_l, 0.0) + noise
            self.denoms.append(denom)
            self.e_at_pending.append(c_l / math.sqrt(denom))
        self._P = P
        self._Wp = Wp

    def conditioned(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mean, conditioned latent variance) at query points."""
        mean, var, W = _predict_full(self.g, X)
        if not self.pending:
            return mean, var
        Kq = kernel_matrix(X, self._P, self.g.hyper.kernel)
        C = Kq - W.T @ self._Wp if W.size else Kq  # (M, J)
        es: list[np.ndarray] = []
        for l in range(len(self.pending)):
            c_l = C[:, l].copy()
            for m, e_m in enumerate(es):
                c_l = c_l - e_m * self.e_at_pending[m][l]
            es.append(c_l / math.sqrt(self.denoms[l]))
            var = var - es[-1] ** 2
        return mean, np.maximum(var, 0.0)


def optimize_acquisition(
    g: GPSurrogate,
    dom: SearchDomain,
    u: float,
    seed,
    pending: list[np.ndarray] | None = None,
    n_polish: int = 5,
) -> np.ndarray:
    """Maximize the acquisition over a box domain.

    A scrambled Sobol grid (1024 points) seeds multi-start coordinate
    descent from the top few grid points; the returned point always scores
    at least as high as every grid point.
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    cond = _PendingConditioner(g, pending or [])
    qseed = seed_sequence(*keys, 0x50B0).generate_state(1)[0]
    sob = scipy.stats.qmc.Sobol(d=dom.dim, scramble=True, seed=int(qseed))
    grid = dom.lo + sob.random_base2(10) * dom.span

    def score(X):
        mean, var = cond.conditioned(X)
        return log_maxiqr_values(mean, var, u)

    vals = score(grid)
    order = np.argsort(vals)[::-1]
    starts = grid[order[:n_polish]].copy()
    best_idx = _argmax_lex(vals, grid)
    best_x, best_v = grid[best_idx].copy(), vals[best_idx]

    deltas = np.tile(dom.span / 20.0, (starts.shape[0], 1))
    cur_v = vals[order[:n_polish]].copy()
    for _ in range(40):
        improved = False
        for d in range(dom.dim):
            plus = starts.copy()
            plus[:, d] = np.minimum(plus[:, d] + deltas[:, d], dom.hi[d])
            minus = starts.copy()
            minus[:, d] = np.maximum(minus[:, d] - deltas[:, d], dom.lo[d])
            v_plus = score(plus)
            v_minus = score(minus)
            take_plus = v_plus > np.maximum(cur_v, v_minus)
            take_minus = v_minus > np.maximum(cur_v, v_plus)
            starts[take_plus] = plus[take_plus]
            cur_v[take_plus] = v_plus[take_plus]
            starts[take_minus] = minus[take_minus]
            cur_v[take_minus] = v_minus[take_minus]
            improved = improved or bool(np.any(take_plus | take_minus))
        if not improved:
            deltas *= 0.5
            if np.all(deltas < 1e-7 * dom.span):
                break
    k = int(np.argmax(cur_v))
    if cur_v[k] > best_v:
        best_x, best_v = starts[k].copy(), cur_v[k]
    return best_x


def active_refine(
    g: GPSurrogate,
    train: TrainingSet,
    true_logpdf,
    dom: SearchDomain,
    cfg: AcquisitionConfig,
    fit_cfg: FitConfig,
    seed,
    refit_restarts: int = 1,
) -> tuple[TrainingSet, GPSurrogate, SearchDomain, dict]:
    """Acquire new true-density evaluations where the surrogate is weakest.

    t_refine iterations of greedy batches selected by continuous acquisition
    optimization; the search domain only ever grows (new points plus a 10%
    margin). Non-finite target values are recorded with a low-density
    penalty instead of aborting.
    """
    cfg = cfg.resolved(train.dim)
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    n_evals = 0
    n_penalized = 0
    hull = train.inputs.copy()
    for t in range(cfg.t_refine):
        pending: list[np.ndarray] = []
        for b in range(cfg.n_batch):
            x = optimize_acquisition(g, dom, cfg.u, (*keys, t, b), pending=pending)
            pending.append(x)
        batch = np.vstack(pending)
        ys = np.asarray(true_logpdf(batch), dtype=float)
        n_evals += batch.shape[0]
        bad = ~np.isfinite(ys)
        if np.any(bad):
            ys[bad] = float(train.targets.min()) - 10.0 * train.dim
            n_penalized += int(bad.sum())
        train, _ = train.added(batch, ys)
        hull = np.vstack([hull, batch])
        dom = dom.union(SearchDomain.from_points(hull, margin=0.1))
        g = gp_fit(
            train,
            fit_cfg.with_warm_start(g.hyper, refit_restarts),
            seed=seed_sequence(*keys, 0xAC7, t).generate_state(1)[0],
        )
    return train, g, dom, {"refine_evals": n_evals, "penalized": n_penalized}
