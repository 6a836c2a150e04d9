"""Tempered subposterior targets and seeded adaptive random-walk MCMC."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._seeding import rng as _derive_rng

# proposal covariance is re-estimated at this cadence during warmup
_ADAPT_INTERVAL = 25
_TARGET_ACCEPT = 0.234


@dataclass(frozen=True)
class TargetDensity:
    """One node's target: tempered prior plus partition likelihood.

    ``log_prior`` and ``log_likelihood`` are batch callables over
    unconstrained parameters; ``sample_init`` draws chain starting points
    (prior draws unless overridden by the chain config).
    """

    log_prior: Callable[[np.ndarray], np.ndarray]
    log_likelihood: Callable[[np.ndarray, np.ndarray], np.ndarray]
    temper_k: int
    sample_init: Callable[[np.random.Generator, int], np.ndarray]

    def log_density(self, U: np.ndarray, partition: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return self.log_prior(U) / self.temper_k + self.log_likelihood(U, partition)


def subposterior_logpdf(t: TargetDensity, partition: np.ndarray, theta: np.ndarray) -> float:
    """Tempered-prior subposterior log density at a single point."""
    theta = np.asarray(theta, dtype=float)
    val = float(t.log_density(theta[None, :], partition)[0])
    if not np.isfinite(val):
        raise ValueError(f"non-finite subposterior log density at theta={theta.tolist()}")
    return val


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 2500
    init_points: np.ndarray | None = None
    step_scale: float = 0.25

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_samples) < 1:
            raise ValueError("chain counts must be positive")
        if self.step_scale <= 0:
            raise ValueError("step_scale must be positive")


@dataclass(frozen=True)
class SampleSet:
    """MCMC output: draws, their stored log densities, and chain labels."""

    points: np.ndarray
    log_densities: np.ndarray
    chain_ids: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (len(self.points) == len(self.log_densities) == len(self.chain_ids)):
            raise ValueError("inconsistent sample set lengths")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def run_mcmc(
    t: TargetDensity,
    partition: np.ndarray,
    cfg: ChainConfig,
    seed,
) -> SampleSet:
    """Adaptive random-walk Metropolis, deterministic for a given seed.

    Chains run in lockstep with independent RNG streams derived from
    (seed..., chain_id). During warmup the proposal covariance tracks the
    per-chain empirical covariance (scaled 2.38^2/D) and a global log-scale
    chases a 0.234 acceptance rate; both freeze when sampling starts.
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    C = cfg.n_chains
    chain_rngs = [_derive_rng(*keys, c) for c in range(C)]

    # starting points: explicit inits (cycled) or prior draws per chain
    if cfg.init_points is not None:
        inits = np.atleast_2d(np.asarray(cfg.init_points, dtype=float))
        X = np.stack([inits[c % len(inits)] for c in range(C)])
    else:
        X = np.vstack([t.sample_init(chain_rngs[c], 1) for c in range(C)])
    D = X.shape[1]

    lp = t.log_density(X, partition)
    if not np.all(np.isfinite(lp)):
        raise ValueError("non-finite target at initial points")

    n_total = cfg.n_warmup + cfg.n_samples
    noise = np.stack([chain_rngs[c].standard_normal((n_total, D)) for c in range(C)], axis=1)
    log_u = np.log(np.stack([chain_rngs[c].uniform(size=n_total) for c in range(C)], axis=1))

    prop_chol = np.tile(cfg.step_scale * np.eye(D), (C, 1, 1))
    log_lambda = np.zeros(C)
    mean = X.copy()
    m2 = np.zeros((C, D, D))
    count = 1

    out_pts = np.empty((C, cfg.n_samples, D))
    out_lp = np.empty((C, cfg.n_samples))
    accepts = np.zeros(C)

    scaled_chol = prop_chol.copy()
    for step in range(n_total):
        warm = step < cfg.n_warmup
        prop = X + np.einsum("cij,cj->ci", scaled_chol, noise[step])
        lp_prop = t.log_density(prop, partition)
        log_alpha = np.where(np.isnan(lp_prop), -np.inf, lp_prop - lp)
        acc = log_u[step] < log_alpha
        X[acc] = prop[acc]
        lp[acc] = lp_prop[acc]

        if warm:
            # Welford covariance update, vectorized over chains
            count += 1
            delta = X - mean
            mean += delta / count
            m2 += np.einsum("ci,cj->cij", delta, X - mean)
            alpha_prob = np.exp(np.minimum(log_alpha, 0.0))
            log_lambda += (step + 1.0) ** -0.6 * (alpha_prob - _TARGET_ACCEPT)
            if (step + 1) % _ADAPT_INTERVAL == 0 and count > 10 * D:
                cov = m2 / (count - 1)
                cov += 1e-12 * np.eye(D) + 1e-6 * cfg.step_scale**2 * np.eye(D)
                prop_chol = np.linalg.cholesky(2.38**2 / D * cov)
            scaled_chol = np.exp(log_lambda)[:, None, None] * prop_chol
        else:
            k = step - cfg.n_warmup
            out_pts[:, k] = X
            out_lp[:, k] = lp
            accepts += acc

    rates = accepts / cfg.n_samples
    diagnostics = {"acceptance_rates": rates, "mean_acceptance": float(rates.mean())}
    if np.all(rates < 0.01):
        diagnostics["stuck"] = True
        warnings.warn("all chains stuck: acceptance below 1%", RuntimeWarning)

    chain_ids = np.repeat(np.arange(C), cfg.n_samples)
    return SampleSet(
        points=out_pts.reshape(C * cfg.n_samples, D),
        log_densities=out_lp.reshape(C * cfg.n_samples),
        chain_ids=chain_ids,
        diagnostics=diagnostics,
    )


def partition_data(n: int, k: int, seed) -> list[np.ndarray]:
    """Random equal split of observation indices into k partitions.

    The remainder after equal division is spread round-robin, so partition
    sizes differ by at most one.
    """
    if k < 1 or k > n:
        raise ValueError("need 1 <= k <= n")
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    perm = _derive_rng(*keys, 0x5711).permutation(n)
    base, extra = divmod(n, k)
    parts = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(np.sort(perm[start : start + size]))
        start += size
    return parts
