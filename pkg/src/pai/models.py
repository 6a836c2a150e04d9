"""Synthetic benchmark models: data generation, unconstrained-space
log-densities and ground-truth posteriors.

Three models: a four-mode mixture-likelihood model, a warped heavy-tailed
(Student's t) model, and a rare-event categorical model on the probability
simplex. MCMC and surrogates operate in unconstrained coordinates; the
categorical model maps the 2-simplex to R^2 via an additive log-ratio
bijection whose Jacobian is folded into the prior density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm as _norm

from . import _kernels
from ._seeding import rng as _derive_rng

# prior box half-width in prior standard deviations: leaves < 1e-12 mass outside
_PRIOR_TAIL_Z = float(_norm.isf(0.5e-12))

GRID_STABILITY_TOL = 1e-3


@dataclass(frozen=True)
class Dataset:
    """Generated observations plus the parameters that produced them."""

    model: str
    values: np.ndarray
    seed: int
    theta_true: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]


class Model:
    """Common interface: log densities over unconstrained parameters.

    ``log_prior`` includes the constraint bijection's log-Jacobian, so
    tempering the prior by 1/K and summing partition likelihoods telescopes
    exactly to the full-data log posterior.
    """

    name: str = ""
    dim: int = 2

    def log_prior(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, U: np.ndarray, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def generate(self, n: int, seed: int, theta_true=...) -> Dataset:
        raise NotImplementedError

    def metric_transform(self, U: np.ndarray) -> np.ndarray:
        """Map unconstrained samples to the space where metrics live."""
        return np.atleast_2d(U)

    def ground_truth(self, data, resolution, seed, n_draws=100_000, validate=False):
        raise NotImplementedError


class MultiModalModel(Model):
    """Two-component mixture likelihood whose posterior has four modes.

    Each mixture component is centered on a second-degree polynomial of one
    coordinate with roots at +/-0.6, so data generated at a root yields
    posterior modes near every sign combination of (0.6, 0.6).
    """

    name = "multimodal"
    dim = 2
    sigma_p = 0.25
    sigma_l = 0.25
    root = 0.6

    def poly(self, x):
        return (self.root - x) * (-self.root - x)

    @property
    def default_theta_true(self) -> np.ndarray:
        return np.array([self.root, self.root])

    def log_prior(self, U):
        U = np.atleast_2d(U)
        return -0.5 * np.sum((U / self.sigma_p) ** 2, axis=1) - self.dim * math.log(
            self.sigma_p * math.sqrt(2 * math.pi)
        )

    def log_likelihood(self, U, values):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if values.size == 0:
            return np.zeros(U.shape[0])
        return _kernels.mixture_batch(
            np.ascontiguousarray(self.poly(U[:, 0])),
            np.ascontiguousarray(self.poly(U[:, 1])),
            np.ascontiguousarray(values, dtype=float),
            1.0 / (2.0 * self.sigma_l**2),
            -math.log(self.sigma_l * math.sqrt(2 * math.pi)),
        )

    def sample_prior(self, rng, n):
        return rng.normal(0.0, self.sigma_p, size=(n, 2))

    def generate(self, n, seed, theta_true=...):
        rng = _derive_rng(seed, 0xDA7A, 0)
        if theta_true is ...:
            theta_true = self.default_theta_true
        if theta_true is None:
            theta_true = rng.normal(0.0, self.sigma_p, size=2)
        theta_true = np.asarray(theta_true, dtype=float)
        comp = rng.integers(0, 2, size=n)
        means = self.poly(theta_true)[comp]
        values = means + self.sigma_l * rng.normal(size=n)
        return Dataset(self.name, values, seed, theta_true)

    def ground_truth(self, data, resolution=1200, seed=0, n_draws=100_000, validate=False):
        def loglik_grid(g1, g2):
            return _kernels.mixture_grid(
                np.ascontiguousarray(self.poly(g1)),
                np.ascontiguousarray(self.poly(g2)),
                np.ascontiguousarray(data.values, dtype=float),
                1.0 / (2.0 * self.sigma_l**2),
                -math.log(self.sigma_l * math.sqrt(2 * math.pi)),
            )

        half = _PRIOR_TAIL_Z * self.sigma_p
        return _grid_truth(
            loglik_grid, self._logprior_1d, half, resolution, seed, n_draws, validate
        )

    def _logprior_1d(self, g):
        return -0.5 * (g / self.sigma_p) ** 2 - math.log(self.sigma_p * math.sqrt(2 * math.pi))


class WarpedTModel(Model):
    """Heavy-tailed warped model: t-distributed data located at th1 + th2^2."""

    name = "warped_t"
    dim = 2
    sigma_p = 1.0
    nu = 5.0
    scale = math.sqrt(2.0)

    default_theta_true = None  # drawn from the prior per seed

    def log_prior(self, U):
        U = np.atleast_2d(U)
        return -0.5 * np.sum((U / self.sigma_p) ** 2, axis=1) - self.dim * math.log(
            self.sigma_p * math.sqrt(2 * math.pi)
        )

    def log_likelihood(self, U, values):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if values.size == 0:
            return np.zeros(U.shape[0])
        loc = U[:, 0] + U[:, 1] ** 2
        return _kernels.student_batch(
            np.ascontiguousarray(loc),
            np.ascontiguousarray(values, dtype=float),
            self.nu,
            self.scale,
        )

    def sample_prior(self, rng, n):
        return rng.normal(0.0, self.sigma_p, size=(n, 2))

    def generate(self, n, seed, theta_true=...):
        rng = _derive_rng(seed, 0xDA7A, 1)
        if theta_true is ... or theta_true is None:
            theta_true = rng.normal(0.0, self.sigma_p, size=2)
        theta_true = np.asarray(theta_true, dtype=float)
        loc = theta_true[0] + theta_true[1] ** 2
        values = loc + self.scale * rng.standard_t(self.nu, size=n)
        return Dataset(self.name, values, seed, theta_true)

    def ground_truth(self, data, resolution=1000, seed=0, n_draws=100_000, validate=False):
        def loglik_grid(g1, g2):
            return _kernels.student_grid(
                np.ascontiguousarray(g1),
                np.ascontiguousarray(g2),
                np.ascontiguousarray(data.values, dtype=float),
                self.nu,
                self.scale,
            )

        half = _PRIOR_TAIL_Z * self.sigma_p
        return _grid_truth(
            loglik_grid, self._logprior_1d, half, resolution, seed, n_draws, validate
        )

    def _logprior_1d(self, g):
        return -0.5 * (g / self.sigma_p) ** 2 - math.log(self.sigma_p * math.sqrt(2 * math.pi))


class RareCategoricalModel(Model):
    """Three-class categorical model with two rare classes.

    Inference runs on the 2-simplex through an additive log-ratio map
    u = (log th1/th3, log th2/th3); the prior is a symmetric Dirichlet
    and the exact posterior is available by conjugacy.
    """

    name = "rare_categorical"
    dim = 2
    alpha = 1.0 / 3.0

    default_theta_true = None  # depends on N; set inside generate

    def _log_z(self, U):
        # log(1 + e^u1 + e^u2), computed stably
        U = np.atleast_2d(U)
        m = np.maximum(np.max(U, axis=1), 0.0)
        return m + np.log(
            np.exp(-m) + np.exp(U[:, 0] - m) + np.exp(U[:, 1] - m)
        )

    def to_simplex(self, U) -> np.ndarray:
        U = np.atleast_2d(U)
        lz = self._log_z(U)
        th1 = np.exp(U[:, 0] - lz)
        th2 = np.exp(U[:, 1] - lz)
        return np.column_stack([th1, th2, 1.0 - th1 - th2])

    def from_simplex(self, theta) -> np.ndarray:
        theta = np.clip(np.atleast_2d(theta), 1e-12, None)
        return np.column_stack(
            [np.log(theta[:, 0] / theta[:, 2]), np.log(theta[:, 1] / theta[:, 2])]
        )

    def log_prior(self, U):
        # Dirichlet(alpha) density plus ALR log-Jacobian log(th1 th2 th3)
        U = np.atleast_2d(U)
        lz = self._log_z(U)
        const = gammaln(3 * self.alpha) - 3 * gammaln(self.alpha)
        return const + self.alpha * (U[:, 0] + U[:, 1]) - 3 * self.alpha * lz

    def log_likelihood(self, U, values):
        U = np.atleast_2d(U)
        if values.size == 0:
            return np.zeros(U.shape[0])
        c = np.bincount(np.asarray(values, dtype=int), minlength=3).astype(float)
        lz = self._log_z(U)
        return c[0] * U[:, 0] + c[1] * U[:, 1] - c.sum() * lz

    def sample_prior(self, rng, n):
        theta = rng.dirichlet(np.full(3, self.alpha), size=n)
        return self.from_simplex(theta)

    def generate(self, n, seed, theta_true=...):
        if n < 3:
            raise ValueError("need at least 3 observations")
        rng = _derive_rng(seed, 0xDA7A, 2)
        if theta_true is ... or theta_true is None:
            theta_true = np.array([1.0 / n, 1.0 / n, (n - 2.0) / n])
        theta_true = np.asarray(theta_true, dtype=float)
        values = rng.choice(3, size=n, p=theta_true)
        return Dataset(self.name, values, seed, theta_true)

    def metric_transform(self, U):
        # metrics live on the first two simplex coordinates
        return self.to_simplex(U)[:, :2]

    def posterior_alpha(self, data) -> np.ndarray:
        counts = np.bincount(np.asarray(data.values, dtype=int), minlength=3)
        return self.alpha + counts

    def ground_truth(self, data, resolution=0, seed=0, n_draws=100_000, validate=False):
        alpha_post = self.posterior_alpha(data)
        rng = _derive_rng(seed, 0x7271, 2)
        draws = rng.dirichlet(alpha_post, size=n_draws)[:, :2]
        mean = alpha_post / alpha_post.sum()
        return GroundTruth(
            kind="exact",
            reference_draws=draws,
            marginal_means=mean[:2].copy(),
            dirichlet_alpha=alpha_post,
        )


@dataclass(frozen=True)
class GroundTruth:
    """Reference posterior: normalized grid (D<=2) or exact conjugate form."""

    kind: str
    reference_draws: np.ndarray
    marginal_means: np.ndarray
    grid_axes: tuple[np.ndarray, np.ndarray] | None = None
    log_masses: np.ndarray | None = field(repr=False, default=None)
    dirichlet_alpha: np.ndarray | None = None

    def region_mass(self, lo, hi) -> float:
        """Posterior mass of an axis-aligned box (grid truths only)."""
        if self.kind != "grid":
            raise ValueError("region mass requires a grid ground truth")
        g1, g2 = self.grid_axes
        m1 = (g1 >= lo[0]) & (g1 <= hi[0])
        m2 = (g2 >= lo[1]) & (g2 <= hi[1])
        if not (m1.any() and m2.any()):
            return 0.0
        return float(np.exp(self.log_masses[np.ix_(m1, m2)]).sum())


def _grid_masses(loglik_grid, logprior_1d, half, resolution):
    cell = 2.0 * half / resolution
    g = -half + cell * (np.arange(resolution) + 0.5)
    lp = loglik_grid(g, g) + logprior_1d(g)[:, None] + logprior_1d(g)[None, :]
    flat = lp.ravel()
    mx = flat.max()
    logz = mx + math.log(np.sum(np.exp(flat - mx)))
    log_masses = lp - logz
    return g, log_masses


def _grid_truth(loglik_grid, logprior_1d, half, resolution, seed, n_draws, validate):
    g, log_masses = _grid_masses(loglik_grid, logprior_1d, half, resolution)
    masses = np.exp(log_masses)
    m1 = masses.sum(axis=1)
    m2 = masses.sum(axis=0)
    means = np.array([float(m1 @ g), float(m2 @ g)])
    if validate:
        g2x, lm2x = _grid_masses(loglik_grid, logprior_1d, half, 2 * resolution)
        mm = np.exp(lm2x)
        means2 = np.array([float(mm.sum(axis=1) @ g2x), float(mm.sum(axis=0) @ g2x)])
        if np.max(np.abs(means2 - means)) > GRID_STABILITY_TOL:
            raise ValueError("increase resolution")
    rng = _derive_rng(seed, 0x7271, 1)
    probs = masses.ravel()
    probs = probs / probs.sum()
    counts = rng.multinomial(n_draws, probs)
    idx = np.repeat(np.arange(probs.size), counts)
    cell = g[1] - g[0]
    pts = np.column_stack([g[idx // resolution], g[idx % resolution]])
    pts += rng.uniform(-0.5 * cell, 0.5 * cell, size=pts.shape)
    return GroundTruth(
        kind="grid",
        reference_draws=pts,
        marginal_means=means,
        grid_axes=(g, g.copy()),
        log_masses=log_masses,
    )


_MODELS = {
    m.name: m for m in (MultiModalModel(), WarpedTModel(), RareCategoricalModel())
}


def get_model(name: str) -> Model:
    try:
        return _MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(_MODELS)}") from None


def gen_multimodal(n: int, seed: int, theta_true=...) -> Dataset:
    return _MODELS["multimodal"].generate(n, seed, theta_true)


def gen_warped_t(n: int, seed: int, theta_true=...) -> Dataset:
    return _MODELS["warped_t"].generate(n, seed, theta_true)


def gen_rare_categorical(n: int, seed: int) -> Dataset:
    return _MODELS["rare_categorical"].generate(n, seed)


def ground_truth(model: Model, data: Dataset, resolution: int = 0, seed: int = 0, **kw):
    """Ground-truth posterior for a dataset (grid for D<=2, exact otherwise)."""
    if resolution:
        return model.ground_truth(data, resolution=resolution, seed=seed, **kw)
    return model.ground_truth(data, seed=seed, **kw)


def model_logpost(model: Model, data: Dataset, theta_unconstrained) -> np.ndarray:
    """Full-data unnormalized log posterior (Jacobian included)."""
    U = np.atleast_2d(np.asarray(theta_unconstrained, dtype=float))
    return model.log_prior(U) + model.log_likelihood(U, data.values)
