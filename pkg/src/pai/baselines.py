"""Reference combination strategies for subposterior samples.

Parametric Gaussian product, nonparametric product-of-KDEs sampled by
component-index Gibbs sweeps, and a plain GP combiner trained on regularly
thinned MCMC draws (no sharing, no refinement) with optional distributed
importance sampling. The GP baseline goes through the same surrogate
machinery as the full pipeline, differing only in training-set choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._seeding import rng as _derive_rng
from ._seeding import seed_sequence
from .gp import FitConfig, TrainingSet, gp_fit
from .pipeline import CommLedger, ProposalConfig, combine, dis_refine, sample_combined
from .sampling import SampleSet


@dataclass(frozen=True)
class GaussianApprox:
    """Moment-matched Gaussian (product of subposterior factors)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(
            self, "covariance", np.atleast_2d(np.asarray(self.covariance, dtype=float))
        )
        eig = np.linalg.eigvalsh(self.covariance)
        if np.any(eig < -1e-10):
            raise ValueError("covariance not positive semi-definite")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        L = np.linalg.cholesky(self.covariance + 1e-12 * np.eye(len(self.mean)))
        return self.mean + rng.standard_normal((n, len(self.mean))) @ L.T


def combine_parametric(sample_sets: list[np.ndarray]) -> GaussianApprox:
    """Product of per-set moment-matched Gaussians (precision pooling)."""
    if not sample_sets:
        raise ValueError("need at least one sample set")
    precisions = []
    weighted = []
    for pts in sample_sets:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        D = pts.shape[1]
        if len(pts) < D + 1:
            raise ValueError("need at least D+1 points per set")
        cov = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
        try:
            prec = np.linalg.inv(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular subposterior covariance") from exc
        precisions.append(prec)
        weighted.append(prec @ pts.mean(axis=0))
    lam = np.sum(precisions, axis=0)
    cov = np.linalg.inv(lam)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ np.sum(weighted, axis=0)
    return GaussianApprox(mean, cov)


def _bandwidths(sample_sets, rule) -> list[np.ndarray]:
    out = []
    for pts in sample_sets:
        D = pts.shape[1]
        if isinstance(rule, str):
            if rule != "scott":
                raise ValueError(f"unknown bandwidth rule {rule!r}")
            h = len(pts) ** (-1.0 / (D + 4)) * pts.std(axis=0, ddof=1)
            h = np.where(h > 0, h, 1e-6)
        else:
            h = np.broadcast_to(np.asarray(rule, dtype=float), (D,)).copy()
        out.append(h)
    return out


def combine_nonparametric(
    sample_sets: list[np.ndarray],
    bandwidth_rule="scott",
    n_out: int = 10_000,
    seed: int = 0,
    n_burn: int = 100,
) -> np.ndarray:
    """Draws from the product of per-set Gaussian KDEs.

    The sampler state is one kernel index per set; each Gibbs sweep
    resamples every index from its conditional (a softmax over pairwise
    kernel products) and emits one draw from the resulting Gaussian.
    """
    sets = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sample_sets]
    S = min(len(s) for s in sets)
    sets = [s[:S] for s in sets]
    K = len(sets)
    D = sets[0].shape[1]
    hs = _bandwidths(sets, bandwidth_rule)
    inv_h2 = np.stack([1.0 / h**2 for h in hs])  # (K, D)
    lam = inv_h2.sum(axis=0)  # (D,)

    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _derive_rng(*keys, 0x9055)
    idx = rng.integers(0, S, size=K)
    out = np.empty((n_out, D))

    def precision_weighted(k_excluded):
        m = np.zeros(D)
        for j in range(K):
            if j != k_excluded:
                m += sets[j][idx[j]] * inv_h2[j]
        return m

    n_sweeps = n_burn + n_out
    for sweep in range(n_sweeps):
        for k in range(K):
            m = precision_weighted(k)
            X = sets[k]  # (S, D)
            # log weight of candidate x: -0.5 [x^2/h^2 - (m + x/h^2)^2 / lam]
            a = X * X @ inv_h2[k]
            b = np.sum((m[None, :] + X * inv_h2[k]) ** 2 / lam, axis=1)
            logw = -0.5 * (a - b)
            logw -= logw.max()
            w = np.exp(logw)
            idx[k] = rng.choice(S, p=w / w.sum())
        if sweep >= n_burn:
            m = precision_weighted(-1)
            mu = m / lam
            out[sweep - n_burn] = mu + rng.standard_normal(D) / np.sqrt(lam)
    return out


def thin_to_training(ss: SampleSet, size: int) -> TrainingSet:
    """Regular-interval thinning of MCMC output to a GP training set."""
    stride = max(len(ss) // size, 1)
    idx = np.arange(min(size, len(ss))) * stride
    empty = TrainingSet(np.empty((0, ss.dim)), np.empty(0))
    train, _ = empty.added(ss.points[idx], ss.log_densities[idx])
    return train


def combine_gp_baseline(
    sample_sets: list[SampleSet],
    train_size: int,
    fit_cfg: FitConfig,
    proposal_cfg: ProposalConfig,
    seed,
    n_out: int = 10_000,
    true_logpdfs=None,
    ledger: CommLedger | None = None,
):
    """Plain GP combiner: thin, fit per node, sum means, (re)sample.

    With ``true_logpdfs`` the optional distributed importance sampling
    stage reweights against the true subposteriors.
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    surrogates = []
    for k, ss in enumerate(sample_sets):
        train = thin_to_training(ss, train_size)
        s = seed_sequence(*keys, 0x6B, k).generate_state(1)[0]
        surrogates.append(gp_fit(train, fit_cfg, seed=int(s)))
    c = combine(surrogates)
    if true_logpdfs is not None:
        samples, diag = dis_refine(c, true_logpdfs, n_out, proposal_cfg, (*keys, 0xD0), ledger)
    else:
        samples, diag = sample_combined(c, n_out, proposal_cfg, (*keys, 0xC0))
    return samples, c, diag
