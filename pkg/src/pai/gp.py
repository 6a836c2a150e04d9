"""Exact GP regression on log-density observations.

Squared-exponential kernel, negative-quadratic mean, fixed Gaussian
observation noise, MAP hyperparameter training under data-dependent
priors, and closed-form posterior prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from ._seeding import rng as _derive_rng

# Points closer than this (max-norm) count as duplicates of a training input.
DUPLICATE_TOL = 1e-10

# Diagonal jitter ladder tried when the Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

DEFAULT_NOISE_VARIANCE = 1e-3

# Log-normal prior scale for length scales (both kernel and mean function).
LENGTHSCALE_PRIOR_SCALE = math.log(math.sqrt(1e3))


class FitError(RuntimeError):
    """Raised when MAP training cannot produce a usable surrogate."""


# ---------------------------------------------------------------------------
# hyperparameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel: output variance and per-dimension scales."""

    output_scale_sq: float
    length_scales: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "length_scales", np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        )
        if not np.isfinite(self.output_scale_sq) or self.output_scale_sq <= 0:
            raise ValueError("output_scale_sq must be positive and finite")
        if not np.all(np.isfinite(self.length_scales)) or np.any(self.length_scales <= 0):
            raise ValueError("length_scales must be positive and finite")


@dataclass(frozen=True)
class MeanParams:
    """Negative-quadratic mean: maximum, location and per-dimension scales."""

    maximum: float
    location: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location", np.atleast_1d(np.asarray(self.location, dtype=float)))
        object.__setattr__(self, "scales", np.atleast_1d(np.asarray(self.scales, dtype=float)))
        if not np.isfinite(self.maximum):
            raise ValueError("maximum must be finite")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("scales must be positive and finite")
        if self.location.shape != self.scales.shape:
            raise ValueError("location/scales dimension mismatch")


@dataclass(frozen=True)
class GPHyperparams:
    kernel: KernelParams
    mean: MeanParams
    noise_variance: float = DEFAULT_NOISE_VARIANCE

    def __post_init__(self):
        if not np.isfinite(self.noise_variance) or self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive and finite")

    @property
    def dim(self) -> int:
        return self.kernel.length_scales.size

    def as_vector(self) -> np.ndarray:
        """Flatten to the communication/serialization order (3D+3 scalars)."""
        return np.concatenate(
            [
                [self.kernel.output_scale_sq],
                self.kernel.length_scales,
                [self.mean.maximum],
                self.mean.location,
                self.mean.scales,
                [self.noise_variance],
            ]
        )


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSet:
    """Training inputs (N, D) and observed log-density targets (N,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_1d(np.asarray(self.targets, dtype=float))
        if X.size == 0:
            X = X.reshape(0, X.shape[1] if X.ndim == 2 and X.shape[1] else 1)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError("inputs/targets length mismatch")
        if y.size and not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        if X.size and not np.all(np.isfinite(X)):
            raise ValueError("inputs must be finite")
        if X.shape[0] > 1 and _has_duplicates(X):
            raise ValueError("duplicate training inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def added(self, points: np.ndarray, values: np.ndarray) -> tuple["TrainingSet", np.ndarray]:
        """Return a new set with non-duplicate rows appended.

        Points within ``DUPLICATE_TOL`` (max-norm) of an existing input, or
        of an earlier point in the same batch, are rejected. The boolean
        mask of points actually kept is returned alongside.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.atleast_1d(np.asarray(values, dtype=float))
        keep = np.zeros(points.shape[0], dtype=bool)
        X = self.inputs
        for i, p in enumerate(points):
            if X.shape[0] == 0 or np.min(np.max(np.abs(X - p), axis=1)) > DUPLICATE_TOL:
                X = np.vstack([X, p])
                keep[i] = True
        if not np.any(keep):
            return self, keep
        new = TrainingSet(
            np.vstack([self.inputs, points[keep]]) if len(self) else points[keep],
            np.concatenate([self.targets, values[keep]]),
        )
        return new, keep


def _has_duplicates(X: np.ndarray) -> bool:
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    gaps = np.max(np.abs(np.diff(Xs, axis=0)), axis=1)
    return bool(np.any(gaps <= DUPLICATE_TOL))


@dataclass(frozen=True)
class BoundingStats:
    """Bounding box (with margin), box lengths and target range of a set."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    lengths: np.ndarray
    y_min: float
    y_max: float


def bounding_stats(train: TrainingSet, margin: float = 0.1) -> BoundingStats:
    """Box of the training inputs extended by ``margin`` (split per side).

    Degenerate dimensions (zero spread) fall back to unit length so that
    the box invariants (lo < hi) hold for any non-empty set.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    lo = train.inputs.min(axis=0)
    hi = train.inputs.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    lo = lo - 0.5 * margin * span
    hi = hi + 0.5 * margin * span
    return BoundingStats(
        box_lo=lo,
        box_hi=hi,
        lengths=hi - lo,
        y_min=float(train.targets.min()),
        y_max=float(train.targets.max()),
    )


# ---------------------------------------------------------------------------
# kernel / mean evaluation
# ---------------------------------------------------------------------------


def kernel_eval(x: np.ndarray, x_prime: np.ndarray, k: KernelParams) -> float:
    """Squared-exponential covariance between two points."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_prime))):
        raise ValueError("invalid point")
    if x.shape != x_prime.shape or x.shape[-1] != k.length_scales.size:
        raise ValueError("dimension mismatch")
    z = (x - x_prime) / k.length_scales
    return float(k.output_scale_sq * np.exp(-0.5 * np.sum(z * z)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, k: KernelParams) -> np.ndarray:
    """Cross-covariance matrix between two point sets (kA, kB) -> (kA, kB)."""
    A = np.atleast_2d(A) / k.length_scales
    B = np.atleast_2d(B) / k.length_scales
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return k.output_scale_sq * np.exp(-0.5 * sq)


def mean_eval(x: np.ndarray, m: MeanParams) -> float:
    """Negative-quadratic mean function at a single point."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid point")
    if x.shape[-1] != m.location.size:
        raise ValueError("dimension mismatch")
    z = (x - m.location) / m.scales
    return float(m.maximum - 0.5 * np.sum(z * z))


def mean_vector(X: np.ndarray, m: MeanParams) -> np.ndarray:
    X = np.atleast_2d(X)
    z = (X - m.location) / m.scales
    return m.maximum - 0.5 * np.sum(z * z, axis=1)


# ---------------------------------------------------------------------------
# hyperparameter priors
# ---------------------------------------------------------------------------


def smoothbox_logpdf(x: float, a: float, b: float, sigma: float) -> float:
    """Log-density of a uniform plateau on [a, b] with Gaussian tails.

    Normalized so the density is continuous at the edges:
    plateau height 1 / ((b - a) + sqrt(2*pi)*sigma).
    """
    h = -math.log((b - a) + math.sqrt(2.0 * math.pi) * sigma)
    if x < a:
        return h - 0.5 * ((x - a) / sigma) ** 2
    if x > b:
        return h - 0.5 * ((x - b) / sigma) ** 2
    return h


def _smoothbox_dlogpdf(x: float, a: float, b: float, sigma: float) -> float:
    if x < a:
        return -(x - a) / sigma**2
    if x > b:
        return -(x - b) / sigma**2
    return 0.0


def _lengthscale_prior_loc(stats: BoundingStats) -> np.ndarray:
    D = stats.lengths.size
    return np.log(np.sqrt(D / 6.0) * stats.lengths)


def hyperprior_logpdf(psi: GPHyperparams, stats: BoundingStats) -> float:
    """Sum of independent log-prior terms for the hyperparameters.

    Normal priors in log-space on kernel and mean-function length scales,
    SmoothBox priors on the mean maximum and location, flat prior on the
    log output scale.
    """
    loc = _lengthscale_prior_loc(stats)
    s = LENGTHSCALE_PRIOR_SCALE
    lp = 0.0
    for vals in (np.log(psi.kernel.length_scales), np.log(psi.mean.scales)):
        z = (vals - loc) / s
        lp += float(np.sum(-0.5 * z * z - math.log(s) - 0.5 * math.log(2.0 * math.pi)))
    lp += smoothbox_logpdf(psi.mean.maximum, stats.y_min, stats.y_max, 1.0)
    for i in range(psi.dim):
        lp += smoothbox_logpdf(
            float(psi.mean.location[i]), float(stats.box_lo[i]), float(stats.box_hi[i]), 0.01
        )
    return lp


# ---------------------------------------------------------------------------
# surrogate and posterior prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPSurrogate:
    """Fitted surrogate: training data, hyperparameters, cached Cholesky."""

    train: TrainingSet
    hyper: GPHyperparams
    chol: np.ndarray | None = field(repr=False, default=None)
    alpha: np.ndarray | None = field(repr=False, default=None)

    @staticmethod
    def from_hyper(train: TrainingSet, hyper: GPHyperparams) -> "GPSurrogate":
        """Build the cached factorization for fixed hyperparameters."""
        if len(train) == 0:
            return GPSurrogate(train=train, hyper=hyper)
        L = _chol_gram(train.inputs, hyper)
        r = train.targets - mean_vector(train.inputs, hyper.mean)
        alpha = scipy.linalg.cho_solve((L, True), r, check_finite=False)
        return GPSurrogate(train=train, hyper=hyper, chol=L, alpha=alpha)

    @property
    def dim(self) -> int:
        return self.hyper.dim

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and variance at query points (M, D)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = mean_vector(X, self.hyper.mean)
        if len(self.train) == 0:
            return mu, np.full(X.shape[0], self.hyper.kernel.output_scale_sq)
        Kxq = kernel_matrix(self.train.inputs, X, self.hyper.kernel)
        mean = mu + Kxq.T @ self.alpha
        W = scipy.linalg.solve_triangular(self.chol, Kxq, lower=True, check_finite=False)
        var = self.hyper.kernel.output_scale_sq - np.sum(W * W, axis=0)
        if np.any(var < -DUPLICATE_TOL):
            raise np.linalg.LinAlgError("kernel matrix not positive definite")
        return mean, np.maximum(var, 0.0)

    def white_cross(self, X: np.ndarray) -> np.ndarray:
        """Whitened cross-covariance L^-1 k(X_train, X), shape (N, M).

        Posterior covariance between query sets A and B is then
        k(A, B) - white_cross(A).T @ white_cross(B).
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.train) == 0:
            return np.zeros((0, X.shape[0]))
        Kxq = kernel_matrix(self.train.inputs, X, self.hyper.kernel)
        return scipy.linalg.solve_triangular(self.chol, Kxq, lower=True, check_finite=False)


def gp_posterior(g: GPSurrogate, x: np.ndarray) -> tuple[float, float]:
    """Latent posterior mean and variance at a single point.

    The variance excludes observation noise. Tiny negative variances from
    round-off (within -1e-10) are clamped to zero; anything beyond that
    indicates a broken factorization and raises.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid point")
    mean, var = g.predict(x[None, :])
    return float(mean[0]), float(var[0])


def _chol_gram(X: np.ndarray, hyper: GPHyperparams) -> np.ndarray:
    K = kernel_matrix(X, X, hyper.kernel)
    n = K.shape[0]
    base = K + hyper.noise_variance * np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            return scipy.linalg.cholesky(
                base + jitter * np.eye(n) if jitter else base, lower=True, check_finite=False
            )
        except scipy.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("kernel matrix not positive definite")


# ---------------------------------------------------------------------------
# MAP fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Controls for MAP hyperparameter training."""

    n_restarts: int = 3
    max_evals: int = 500
    ftol: float = 1e-9
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    init_hyper: GPHyperparams | None = None

    def with_warm_start(self, hyper: GPHyperparams, n_restarts: int = 1) -> "FitConfig":
        return replace(self, init_hyper=hyper, n_restarts=n_restarts)


def _pack(hyper: GPHyperparams) -> np.ndarray:
    return np.concatenate(
        [
            [math.log(hyper.kernel.output_scale_sq)],
            np.log(hyper.kernel.length_scales),
            [hyper.mean.maximum],
            hyper.mean.location,
            np.log(hyper.mean.scales),
        ]
    )


def _unpack(z: np.ndarray, D: int, noise_variance: float) -> GPHyperparams:
    return GPHyperparams(
        kernel=KernelParams(math.exp(z[0]), np.exp(z[1 : 1 + D])),
        mean=MeanParams(z[1 + D], z[2 + D : 2 + 2 * D].copy(), np.exp(z[2 + 2 * D :])),
        noise_variance=noise_variance,
    )


def map_objective(
    z: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    stats: BoundingStats,
    noise_variance: float,
    diffsq: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood plus hyperprior, with analytic gradient.

    ``z`` is the packed vector [log sf2, log ell, m0, mu, log omega].
    Returns (value, gradient); failures of the factorization yield a large
    negative value with zero gradient so ascent backtracks.
    """
    N, D = X.shape
    if diffsq is None:
        diffsq = (X[:, None, :] - X[None, :, :]) ** 2
    log_sf2 = z[0]
    log_ell = z[1 : 1 + D]
    m0 = z[1 + D]
    mu = z[2 + D : 2 + 2 * D]
    log_om = z[2 + 2 * D :]
    sf2 = math.exp(log_sf2)
    inv_ell2 = np.exp(-2.0 * log_ell)
    om2 = np.exp(2.0 * log_om)

    Q = diffsq @ inv_ell2
    K = sf2 * np.exp(-0.5 * Q)
    A = K + noise_variance * np.eye(N)
    try:
        L = scipy.linalg.cholesky(A, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return -1e25, np.zeros_like(z)

    Zc = (X - mu) / np.sqrt(om2)
    m = m0 - 0.5 * np.sum(Zc * Zc, axis=1)
    r = y - m
    alpha = scipy.linalg.cho_solve((L, True), r, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    val = -0.5 * float(r @ alpha) - 0.5 * logdet - 0.5 * N * math.log(2.0 * math.pi)

    Ainv = scipy.linalg.cho_solve((L, True), np.eye(N), check_finite=False)
    B = (np.outer(alpha, alpha) - Ainv) * K

    grad = np.empty_like(z)
    grad[0] = 0.5 * float(np.sum(B))
    dxm = X - mu
    for d in range(D):
        grad[1 + d] = 0.5 * float(np.sum(B * diffsq[:, :, d])) * inv_ell2[d]
    grad[1 + D] = float(np.sum(alpha))
    grad[2 + D : 2 + 2 * D] = (alpha @ dxm) / om2
    grad[2 + 2 * D :] = alpha @ (dxm * dxm) / om2

    # hyperprior terms
    loc = _lengthscale_prior_loc(stats)
    s2 = LENGTHSCALE_PRIOR_SCALE**2
    for sl, vals in ((slice(1, 1 + D), log_ell), (slice(2 + 2 * D, None), log_om)):
        zl = vals - loc
        val += float(np.sum(-0.5 * zl * zl / s2)) - D * (
            math.log(LENGTHSCALE_PRIOR_SCALE) + 0.5 * math.log(2.0 * math.pi)
        )
        grad[sl] += -zl / s2
    val += smoothbox_logpdf(m0, stats.y_min, stats.y_max, 1.0)
    grad[1 + D] += _smoothbox_dlogpdf(m0, stats.y_min, stats.y_max, 1.0)
    for d in range(D):
        val += smoothbox_logpdf(mu[d], stats.box_lo[d], stats.box_hi[d], 0.01)
        grad[2 + D + d] += _smoothbox_dlogpdf(mu[d], stats.box_lo[d], stats.box_hi[d], 0.01)
    if not np.isfinite(val):
        return -1e25, np.zeros_like(z)
    return val, grad


def _initial_points(
    train: TrainingSet, stats: BoundingStats, config: FitConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    D = train.dim
    y = train.targets
    loc = _lengthscale_prior_loc(stats)
    inits = []
    if config.init_hyper is not None:
        inits.append(_pack(config.init_hyper))
    if len(inits) < config.n_restarts:
        var_y = float(np.var(y)) if len(train) > 1 else 1.0
        base = np.concatenate(
            [
                [math.log(max(var_y, 1e-6))],
                loc - math.log(4.0),
                [stats.y_max],
                train.inputs[int(np.argmax(y))],
                loc,
            ]
        )
        inits.append(base)
    while len(inits) < config.n_restarts:
        jit = np.concatenate(
            [
                [math.log(max(float(np.var(y)), 1e-6)) + rng.normal(0.0, 1.0)],
                loc + rng.normal(0.0, 1.0, size=D) - math.log(4.0),
                [rng.uniform(stats.y_min, stats.y_max)],
                rng.uniform(stats.box_lo, stats.box_hi),
                loc + rng.normal(0.0, 1.0, size=D),
            ]
        )
        inits.append(jit)
    return inits[: config.n_restarts]


def gp_fit(train: TrainingSet, config: FitConfig | None = None, seed: int = 0) -> GPSurrogate:
    """MAP-fit a surrogate to a training set.

    Multi-start quasi-Newton ascent in log-transformed space; the returned
    hyperparameters attain an objective at least as high as every evaluated
    initialization. Deterministic for a given (train, config, seed).
    """
    if config is None:
        config = FitConfig()
    if len(train) == 0:
        raise FitError("fit failed: empty training set")
    X, y = train.inputs, train.targets
    D = train.dim
    stats = bounding_stats(train)
    diffsq = (X[:, None, :] - X[None, :, :]) ** 2
    rng = _derive_rng(seed, 0x6F17)

    loc = _lengthscale_prior_loc(stats)
    bounds = (
        [(-20.0, 20.0)]
        + [(loc[d] - 13.8, loc[d] + 13.8) for d in range(D)]
        + [(stats.y_min - 20.0 * (1.0 + stats.y_max - stats.y_min), stats.y_max + 20.0)]
        + [
            (stats.box_lo[d] - 0.5 * stats.lengths[d], stats.box_hi[d] + 0.5 * stats.lengths[d])
            for d in range(D)
        ]
        + [(loc[d] - 13.8, loc[d] + 13.8) for d in range(D)]
    )

    def negobj(z):
        v, g = map_objective(z, X, y, stats, config.noise_variance, diffsq)
        return -v, -g

    best_val = -np.inf
    best_z = None
    for z0 in _initial_points(train, stats, config, rng):
        z0 = np.clip(z0, [b[0] for b in bounds], [b[1] for b in bounds])
        v0, _ = map_objective(z0, X, y, stats, config.noise_variance, diffsq)
        if v0 > best_val:
            best_val, best_z = v0, z0
        res = scipy.optimize.minimize(
            negobj,
            z0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxfun": config.max_evals, "ftol": config.ftol, "maxiter": config.max_evals},
        )
        if np.all(np.isfinite(res.x)):
            v, _ = map_objective(res.x, X, y, stats, config.noise_variance, diffsq)
            if v > best_val:
                best_val, best_z = v, res.x
    if best_z is None or best_val <= -1e24:
        raise FitError("fit failed")
    hyper = _unpack(best_z, D, config.noise_variance)
    try:
        return GPSurrogate.from_hyper(train, hyper)
    except np.linalg.LinAlgError as exc:
        raise FitError("fit failed") from exc


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

RECORD_FORMAT = "gp-surrogate/1"


def surrogate_to_record(g: GPSurrogate) -> dict:
    """Plain-dict form of a surrogate (JSON-compatible, full precision)."""
    return {
        "format": RECORD_FORMAT,
        "inputs": g.train.inputs.tolist(),
        "targets": g.train.targets.tolist(),
        "kernel": {
            "output_scale_sq": g.hyper.kernel.output_scale_sq,
            "length_scales": g.hyper.kernel.length_scales.tolist(),
        },
        "mean": {
            "maximum": g.hyper.mean.maximum,
            "location": g.hyper.mean.location.tolist(),
            "scales": g.hyper.mean.scales.tolist(),
        },
        "noise_variance": g.hyper.noise_variance,
    }


def surrogate_from_record(rec: dict) -> GPSurrogate:
    if rec.get("format") != RECORD_FORMAT:
        raise ValueError(f"unknown surrogate record format: {rec.get('format')!r}")
    D = len(rec["kernel"]["length_scales"])
    inputs = np.asarray(rec["inputs"], dtype=float).reshape(-1, D)
    train = TrainingSet(inputs, np.asarray(rec["targets"], dtype=float))
    hyper = GPHyperparams(
        kernel=KernelParams(
            rec["kernel"]["output_scale_sq"], np.asarray(rec["kernel"]["length_scales"])
        ),
        mean=MeanParams(
            rec["mean"]["maximum"],
            np.asarray(rec["mean"]["location"]),
            np.asarray(rec["mean"]["scales"]),
        ),
        noise_variance=rec["noise_variance"],
    )
    return GPSurrogate.from_hyper(train, hyper)
