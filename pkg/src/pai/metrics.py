"""Sample-based posterior comparison metrics and bootstrap significance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from ._seeding import rng as _derive_rng


@dataclass(frozen=True)
class MetricReport:
    """Metric triplet for one run, with per-dimension marginal TV terms."""

    mmtv: float
    w2: float
    gskl: float
    mmtv_per_dim: tuple[float, ...] = ()
    extra: dict = field(default_factory=dict, compare=False)

    def row(self) -> dict:
        return {"mmtv": self.mmtv, "w2": self.w2, "gskl": self.gskl}


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def mmtv(samples_p, samples_q, n_bins: int = 100) -> float:
    """Mean marginal total variation over shared-range histograms."""
    return float(np.mean(mmtv_per_dim(samples_p, samples_q, n_bins)))


def mmtv_per_dim(samples_p, samples_q, n_bins: int = 100) -> np.ndarray:
    P, Q = _as2d(samples_p), _as2d(samples_q)
    if P.shape[0] == 0 or Q.shape[0] == 0 or P.shape[1] != Q.shape[1]:
        raise ValueError("need non-empty sample sets of equal dimension")
    out = np.empty(P.shape[1])
    for d in range(P.shape[1]):
        lo = min(P[:, d].min(), Q[:, d].min())
        hi = max(P[:, d].max(), Q[:, d].max())
        if hi <= lo:
            out[d] = 0.0
            continue
        edges = np.linspace(lo, hi, n_bins + 1)
        hp, _ = np.histogram(P[:, d], bins=edges)
        hq, _ = np.histogram(Q[:, d], bins=edges)
        out[d] = 0.5 * float(np.abs(hp / len(P) - hq / len(Q)).sum())
    return out


def w2(samples_p, samples_q, max_n: int = 512, seed: int = 0) -> float:
    """2-Wasserstein distance between equal-weight empirical measures.

    Both sets are subsampled (without replacement, seeded) to a common
    size, the squared-Euclidean assignment problem is solved exactly, and
    the square root of the optimal mean cost is returned.
    """
    P, Q = _as2d(samples_p), _as2d(samples_q)
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ValueError("need non-empty sample sets")
    m = min(len(P), len(Q), max_n)
    rng = _derive_rng(seed, 0x32)
    if len(P) > m:
        P = P[rng.choice(len(P), size=m, replace=False)]
    if len(Q) > m:
        Q = Q[rng.choice(len(Q), size=m, replace=False)]
    cost = np.sum((P[:, None, :] - Q[None, :, :]) ** 2, axis=2)
    rows, cols = scipy.optimize.linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def _gauss_kl(mu0, cov0, mu1, cov1) -> float:
    D = len(mu0)
    sign1, logdet1 = np.linalg.slogdet(cov1)
    sign0, logdet0 = np.linalg.slogdet(cov0)
    if sign1 <= 0 or sign0 <= 0:
        raise ValueError("singular covariance")
    inv1 = np.linalg.inv(cov1)
    diff = mu1 - mu0
    return 0.5 * float(
        np.trace(inv1 @ cov0) + diff @ inv1 @ diff - D + logdet1 - logdet0
    )


def gskl(samples_p, samples_q) -> float:
    """Symmetrized KL between moment-matched Gaussians of the two sets."""
    P, Q = _as2d(samples_p), _as2d(samples_q)
    D = P.shape[1]
    if len(P) < D + 1 or len(Q) < D + 1:
        raise ValueError("need at least D+1 points per set")
    mu_p, mu_q = P.mean(axis=0), Q.mean(axis=0)
    cov_p = np.atleast_2d(np.cov(P, rowvar=False, ddof=1))
    cov_q = np.atleast_2d(np.cov(Q, rowvar=False, ddof=1))
    return 0.5 * (_gauss_kl(mu_p, cov_p, mu_q, cov_q) + _gauss_kl(mu_q, cov_q, mu_p, cov_p))


def compute_report(
    approx, reference, n_bins: int = 100, w2_max_n: int = 512, seed: int = 0, extra=None
) -> MetricReport:
    per_dim = mmtv_per_dim(approx, reference, n_bins)
    return MetricReport(
        mmtv=float(per_dim.mean()),
        w2=w2(approx, reference, w2_max_n, seed),
        gskl=gskl(approx, reference),
        mmtv_per_dim=tuple(float(v) for v in per_dim),
        extra=dict(extra or {}),
    )


def bootstrap_compare(
    per_method_runs: dict[str, list[float]],
    n_boot: int = 10_000,
    alpha: float = 0.05,
    seed: int = 0,
) -> set[str]:
    """Methods statistically tied with the best (lowest-mean) method.

    For every non-best method the difference of bootstrap means against the
    best method is resampled n_boot times; the method joins the tied set
    when the two-sided bootstrap p-value is at least alpha.
    """
    means = {m: float(np.mean(v)) for m, v in per_method_runs.items()}
    if any(len(v) < 2 for v in per_method_runs.values()):
        raise ValueError("need at least two runs per method")
    best = min(sorted(means), key=lambda m: means[m])
    rng = _derive_rng(seed, 0xB007)
    tied = {best}
    vb = np.asarray(per_method_runs[best], dtype=float)
    for name in sorted(per_method_runs):
        if name == best:
            continue
        vo = np.asarray(per_method_runs[name], dtype=float)
        bb = vb[rng.integers(0, len(vb), size=(n_boot, len(vb)))].mean(axis=1)
        bo = vo[rng.integers(0, len(vo), size=(n_boot, len(vo)))].mean(axis=1)
        diff = bb - bo
        p = 2.0 * min(float(np.mean(diff >= 0)), float(np.mean(diff <= 0)))
        if min(p, 1.0) >= alpha:
            tied.add(name)
    return tied
