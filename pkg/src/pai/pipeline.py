"""Multi-node pipeline: per-node subsampling, the sample-sharing barrier,
active refinement, GP-sum combination, optional distributed importance
sampling, and exact communication-cost accounting.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from ._seeding import rng as _derive_rng
from .acquisition import (
    AcquisitionConfig,
    SearchDomain,
    active_refine,
    active_subsample,
    kmedoids_subset,
)
from .gp import FitConfig, GPSurrogate, TrainingSet
from .sampling import ChainConfig, SampleSet, TargetDensity, partition_data, run_mcmc

HYPERPARAM_COUNT = lambda d: 3 * d + 3  # noqa: E731 - sf2, ell, m0, mu, omega, noise


@dataclass(frozen=True)
class SharingConfig:
    """Acceptance thresholds for points received from other nodes."""

    density_threshold: float = 0.01  # R
    lowdensity_offset: float | None = None  # 20 * D
    n_share: int | None = None  # 25 * D

    def resolved(self, dim: int) -> "SharingConfig":
        return replace(
            self,
            lowdensity_offset=(
                self.lowdensity_offset if self.lowdensity_offset is not None else 20.0 * dim
            ),
            n_share=self.n_share if self.n_share is not None else 25 * dim,
        )


@dataclass(frozen=True)
class ProposalConfig:
    """Mixture proposal for importance sampling from the combined surrogate."""

    n_oversample: int = 20
    mix_uniform: float = 0.5
    box_margin: float = 0.1
    center_offset: float = 2.0  # keep centers with y >= y_max - offset * D
    max_centers_per_node: int = 50
    bandwidth_frac: float = 0.01
    min_ess_frac: float = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    chains: ChainConfig = ChainConfig()
    acquisition: AcquisitionConfig = AcquisitionConfig()
    sharing: SharingConfig = SharingConfig()
    fit: FitConfig = FitConfig()
    proposal: ProposalConfig = ProposalConfig()
    refit_restarts: int = 1
    n_workers: int = 0


@dataclass
class CommLedger:
    """Exact scalar counts for every communication step and target evals."""

    data_distribution: int = 0
    mcmc_upload: int = 0
    sharing: int = 0
    refine_upload: int = 0
    hyperparams: int = 0
    mcmc_evals: dict = field(default_factory=dict)
    sharing_evals: dict = field(default_factory=dict)
    refine_evals: dict = field(default_factory=dict)
    dis_evals: dict = field(default_factory=dict)

    def total(self) -> int:
        return int(
            self.data_distribution
            + self.mcmc_upload
            + self.sharing
            + self.refine_upload
            + self.hyperparams
        )

    def evals_per_node(self) -> dict:
        nodes = set()
        for d in (self.mcmc_evals, self.sharing_evals, self.refine_evals, self.dis_evals):
            nodes.update(d)
        return {
            k: (
                self.mcmc_evals.get(k, 0)
                + self.sharing_evals.get(k, 0)
                + self.refine_evals.get(k, 0)
                + self.dis_evals.get(k, 0)
            )
            for k in sorted(nodes)
        }

    def to_record(self) -> dict:
        return {
            "data_distribution": self.data_distribution,
            "mcmc_upload": self.mcmc_upload,
            "sharing": self.sharing,
            "refine_upload": self.refine_upload,
            "hyperparams": self.hyperparams,
            "total": self.total(),
            "mcmc_evals": {str(k): v for k, v in sorted(self.mcmc_evals.items())},
            "sharing_evals": {str(k): v for k, v in sorted(self.sharing_evals.items())},
            "refine_evals": {str(k): v for k, v in sorted(self.refine_evals.items())},
            "dis_evals": {str(k): v for k, v in sorted(self.dis_evals.items())},
        }


@dataclass
class NodeState:
    """Everything one computing node accumulates through the pipeline."""

    node_id: int
    part_idx: np.ndarray
    samples: SampleSet
    s1: TrainingSet | None = None
    s2: TrainingSet | None = None
    s3: TrainingSet | None = None
    surrogate: GPSurrogate | None = None
    diagnostics: dict = field(default_factory=dict)


def _contains_rows(big: TrainingSet, small: TrainingSet) -> bool:
    if small is None or big is None:
        return False
    n = len(small)
    return len(big) >= n and np.array_equal(big.inputs[:n], small.inputs[:n])


@dataclass(frozen=True)
class CombinedPosterior:
    """Sum-of-surrogate-means log density over the shared parameter space."""

    surrogates: tuple[GPSurrogate, ...]

    def __post_init__(self):
        if len(self.surrogates) == 0:
            raise ValueError("need at least one surrogate")
        dims = {g.dim for g in self.surrogates}
        if len(dims) != 1:
            raise ValueError("surrogate dimension mismatch")

    @property
    def dim(self) -> int:
        return self.surrogates[0].dim

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        for g in self.surrogates:
            out += g.predict(X)[0]
        return out


def combine(surrogates) -> CombinedPosterior:
    """Combine per-node surrogates: log q(theta) = sum of posterior means.

    Summing latent means is also the log of the product of per-node
    posterior medians, since each factor is log-normally distributed.
    """
    return CombinedPosterior(tuple(surrogates))


# ---------------------------------------------------------------------------
# sharing
# ---------------------------------------------------------------------------


def share_barrier(nodes: list[NodeState], ledger: CommLedger | None = None):
    """All-to-all exchange of the selected subsets; returns incoming points.

    Node k receives the union of every other node's stage-one points.
    Only coordinates travel (D scalars per point); receivers re-evaluate
    their own subposterior density locally.
    """
    for node in nodes:
        if node.s1 is None:
            raise RuntimeError("barrier violated: node missing stage-one subset")
    K = len(nodes)
    D = nodes[0].s1.dim
    total_pts = sum(len(n.s1) for n in nodes)
    if ledger is not None:
        ledger.sharing += (K - 1) * total_pts * D
    incoming = []
    for k in range(K):
        others = [nodes[j].s1.inputs for j in range(K) if j != k]
        if others:
            pts = np.vstack(others)
            pts = np.unique(pts, axis=0)
        else:
            pts = np.empty((0, D))
        incoming.append(pts)
    return incoming


def select_shared_samples(
    node: NodeState,
    incoming: np.ndarray,
    true_logpdf,
    cfg: SharingConfig,
    seed,
    ledger: CommLedger | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate incoming points locally and accept the poorly-predicted ones.

    A point is accepted when (a) its true local log density is improbable
    under the surrogate's predictive distribution (density below R), and
    (b) it is not a point that both prediction and truth agree lies far
    below the node's observed maximum. Acceptances above n_share are
    thinned with k-medoids. All criteria are evaluated against the
    pre-sharing surrogate, so the outcome is order-independent.
    """
    incoming = np.atleast_2d(np.asarray(incoming, dtype=float))
    if incoming.size == 0:
        return np.empty((0, node.s1.dim)), np.empty(0)
    cfg = cfg.resolved(node.s1.dim)
    y_true = np.asarray(true_logpdf(incoming), dtype=float)
    if ledger is not None:
        ledger.sharing_evals[node.node_id] = ledger.sharing_evals.get(node.node_id, 0) + len(
            incoming
        )
    mu, var = node.surrogate.predict(incoming)
    pred_var = var + node.surrogate.hyper.noise_variance
    log_dens = -0.5 * np.log(2 * math.pi * pred_var) - 0.5 * (y_true - mu) ** 2 / pred_var
    crit_a = log_dens < math.log(cfg.density_threshold)
    y_max = float(np.max(node.samples.log_densities))
    thr = y_max - cfg.lowdensity_offset
    crit_b = ~((mu < thr) & (y_true < thr))
    accept = crit_a & crit_b
    pts, vals = incoming[accept], y_true[accept]
    if len(pts) > cfg.n_share:
        keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        idx = kmedoids_subset(pts, cfg.n_share, (*keys, node.node_id))
        pts, vals = pts[idx], vals[idx]
    return pts, vals


# ---------------------------------------------------------------------------
# sampling from the combined posterior
# ---------------------------------------------------------------------------


class MixtureProposal:
    """Half uniform over an expanded bounding box, half Gaussian mixture
    centered on high-density training points."""

    def __init__(self, c: CombinedPosterior, cfg: ProposalConfig):
        all_inputs = np.vstack([g.train.inputs for g in c.surrogates])
        self.box = SearchDomain.from_points(all_inputs, margin=cfg.box_margin)
        centers = []
        D = c.dim
        for g in c.surrogates:
            y = g.train.targets
            keep = np.flatnonzero(y >= y.max() - cfg.center_offset * D)
            if keep.size > cfg.max_centers_per_node:
                order = np.argsort(-y[keep], kind="stable")
                keep = keep[order[: cfg.max_centers_per_node]]
            centers.append(g.train.inputs[keep])
        self.centers = np.ascontiguousarray(np.vstack(centers))
        self.bw = cfg.bandwidth_frac * self.box.span
        self.mix = cfg.mix_uniform
        self._log_unif = -float(np.sum(np.log(self.box.span)))
        self._gmm_lognorm = -float(np.sum(np.log(self.bw * math.sqrt(2 * math.pi))))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        n_u = int(round(self.mix * n))
        u = rng.uniform(self.box.lo, self.box.hi, size=(n_u, self.box.dim))
        idx = rng.integers(0, len(self.centers), size=n - n_u)
        g = self.centers[idx] + self.bw * rng.standard_normal((n - n_u, self.box.dim))
        return np.vstack([u, g])

    def logpdf(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        inside = self.box.contains(X)
        lu = np.where(inside, self._log_unif, -np.inf)
        lg = _kernels.gmm_logpdf(
            np.ascontiguousarray(X),
            self.centers,
            np.ascontiguousarray(1.0 / self.bw**2),
            self._gmm_lognorm,
        )
        return np.logaddexp(math.log(self.mix) + lu, math.log1p(-self.mix) + lg)


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a systematic resample of size n from normalized weights."""
    positions = (np.arange(n) + rng.uniform()) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions), len(weights) - 1)


def _importance_stage(c, proposal, n_prop, rng):
    draws = proposal.sample(rng, n_prop)
    logq = c.log_density(draws)
    logw = logq - proposal.logpdf(draws)
    if np.all(~np.isfinite(logw)):
        raise RuntimeError("q misses posterior mass")
    logw = logw - logsumexp(logw)
    w = np.exp(logw)
    ess = float(1.0 / np.sum(w**2))
    return draws, w, ess


def sample_combined(
    c: CombinedPosterior, n: int, cfg: ProposalConfig, seed
) -> tuple[np.ndarray, dict]:
    """Equal-weight draws from the combined surrogate density.

    Importance sampling against the mixture proposal followed by
    systematic resampling; the achieved effective sample size is
    reported and a warning flag raised when it collapses.
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _derive_rng(*keys, 0x5C0)
    proposal = MixtureProposal(c, cfg)
    n_prop = cfg.n_oversample * n
    draws, w, ess = _importance_stage(c, proposal, n_prop, rng)
    diag = {"ess": ess, "n_proposal": n_prop}
    if ess < cfg.min_ess_frac * n_prop:
        diag["low_ess"] = True
    idx = systematic_resample(w, n, rng)
    return draws[idx], diag


def dis_refine(
    c: CombinedPosterior,
    true_logpdfs: list,
    n: int,
    cfg: ProposalConfig,
    seed,
    ledger: CommLedger | None = None,
) -> tuple[np.ndarray, dict]:
    """Distributed importance sampling against the true subposteriors.

    Draws from the combined surrogate q (via its proposal stage), has every
    node evaluate its true log subposterior at the unique draw locations,
    reweights by exp(sum_k log p_k - log q) and resamples to n points.
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _derive_rng(*keys, 0xD15)
    proposal = MixtureProposal(c, cfg)
    n_prop = cfg.n_oversample * n
    draws, w, ess1 = _importance_stage(c, proposal, n_prop, rng)
    idx = systematic_resample(w, n_prop, rng)
    sq = draws[idx]

    uniq, inverse = np.unique(sq, axis=0, return_inverse=True)
    log_p = np.zeros(len(uniq))
    for k, fn in enumerate(true_logpdfs):
        log_p += np.asarray(fn(uniq), dtype=float)
        if ledger is not None:
            ledger.dis_evals[k] = ledger.dis_evals.get(k, 0) + len(uniq)
    logq = c.log_density(uniq)
    logw = (log_p - logq)[inverse]
    if np.all(~np.isfinite(logw)) or np.all(np.isneginf(logw)):
        raise RuntimeError("q misses posterior mass")
    logw = logw - logsumexp(logw)
    w2 = np.exp(logw)
    ess2 = float(1.0 / np.sum(w2**2))
    out = sq[systematic_resample(w2, n, rng)]
    return out, {"ess_stage1": ess1, "ess": ess2, "n_unique": len(uniq)}


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    combined: CombinedPosterior
    samples: np.ndarray
    ledger: CommLedger
    diagnostics: dict
    nodes: list[NodeState]


def _map_nodes(fn, items, n_workers: int):
    if n_workers and n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def run_node_mcmc(model, data, partitions, cfg: PipelineConfig, seed) -> list[SampleSet]:
    """Per-node MCMC on the tempered subposteriors (the shared stage)."""
    K = len(partitions)
    target = TargetDensity(model.log_prior, model.log_likelihood, K, model.sample_prior)

    def one(k):
        return run_mcmc(target, data.values[partitions[k]], cfg.chains, seed=(seed, k))

    return _map_nodes(one, range(K), cfg.n_workers)


def run_pai(
    model,
    data,
    K: int,
    cfg: PipelineConfig,
    seed: int,
    sample_sets: list[SampleSet] | None = None,
    partitions: list[np.ndarray] | None = None,
    share: bool = True,
    refine: bool = True,
    dis: bool = False,
    n_out: int = 10_000,
) -> PipelineResult:
    """Run the full multi-node pipeline on one dataset.

    Stages: partition, per-node MCMC, active subsampling, the sharing
    barrier with local acceptance tests, active refinement, final
    combination, and importance (re)sampling -- optionally against the
    true subposteriors (``dis``). ``share``/``refine`` toggles implement
    the ablations (stage outputs are then carried through unchanged).
    """
    if partitions is None:
        partitions = partition_data(len(data), K, (seed,))
    target = TargetDensity(model.log_prior, model.log_likelihood, K, model.sample_prior)
    ledger = CommLedger()
    ledger.data_distribution = len(data)

    if sample_sets is None:
        sample_sets = run_node_mcmc(model, data, partitions, cfg, seed)
    D = sample_sets[0].dim
    nodes = [
        NodeState(node_id=k, part_idx=partitions[k], samples=sample_sets[k]) for k in range(K)
    ]
    for k, ss in enumerate(sample_sets):
        ledger.mcmc_upload += len(ss) * D
        ledger.mcmc_evals[k] = cfg.chains.n_chains * (
            1 + cfg.chains.n_warmup + cfg.chains.n_samples
        )

    # stage 1: active subsampling from stored draws
    def subsample(node: NodeState):
        train, g = active_subsample(
            node.samples,
            cfg.acquisition,
            cfg.fit,
            seed=(seed, 0xA5, node.node_id),
            refit_restarts=cfg.refit_restarts,
        )
        node.s1 = train
        node.surrogate = g
        return node

    nodes = _map_nodes(subsample, nodes, cfg.n_workers)

    # stage 2: sharing barrier and local acceptance
    if share:
        incoming = share_barrier(nodes, ledger)

        def shared(args):
            node, inc = args
            part_values = data.values[node.part_idx]
            pts, vals = select_shared_samples(
                node,
                inc,
                lambda X: target.log_density(X, part_values),
                cfg.sharing,
                seed=(seed, 0x5A),
            )
            node.diagnostics["shared_accepted"] = len(pts)
            node.diagnostics["sharing_evals"] = len(inc)
            if len(pts):
                s2, _ = node.s1.added(pts, vals)
                node.s2 = s2
                node.surrogate = _refit(node.surrogate, s2, cfg, (seed, 0x5B, node.node_id))
            else:
                node.s2 = node.s1
            return node

        nodes = _map_nodes(shared, list(zip(nodes, incoming)), cfg.n_workers)
        for node in nodes:
            ledger.sharing_evals[node.node_id] = node.diagnostics["sharing_evals"]
        shared_pool = np.vstack([n.s1.inputs for n in nodes])
    else:
        for node in nodes:
            node.s2 = node.s1
            node.diagnostics["shared_accepted"] = 0
        shared_pool = None

    # stage 3: active refinement with new target evaluations
    if refine:
        def refined(node: NodeState):
            base = shared_pool if shared_pool is not None else node.s1.inputs
            dom = SearchDomain.from_points(base, margin=0.1)
            part_values = data.values[node.part_idx]
            train, g, dom, diag = active_refine(
                node.surrogate,
                node.s2,
                lambda X: target.log_density(X, part_values),
                dom,
                cfg.acquisition,
                cfg.fit,
                seed=(seed, 0xAE, node.node_id),
                refit_restarts=cfg.refit_restarts,
            )
            node.s3 = train
            node.surrogate = g
            node.diagnostics.update(diag)
            return node

        nodes = _map_nodes(refined, nodes, cfg.n_workers)
        for node in nodes:
            ledger.refine_evals[node.node_id] = node.diagnostics["refine_evals"]
            ledger.refine_upload += node.diagnostics["refine_evals"] * D
    else:
        for node in nodes:
            node.s3 = node.s2

    ledger.hyperparams = K * HYPERPARAM_COUNT(D)

    for node in nodes:
        if not (_contains_rows(node.s2, node.s1) and _contains_rows(node.s3, node.s2)):
            raise RuntimeError(f"containment chain violated at node {node.node_id}")

    combined = combine([node.surrogate for node in nodes])
    if dis:
        fns = [
            (lambda X, pv=data.values[node.part_idx]: target.log_density(X, pv))
            for node in nodes
        ]
        samples, diag = dis_refine(combined, fns, n_out, cfg.proposal, (seed, 0xD0), ledger)
    else:
        samples, diag = sample_combined(combined, n_out, cfg.proposal, (seed, 0xC0))

    diagnostics = {
        "sampling": diag,
        "acceptance": [n.samples.diagnostics.get("mean_acceptance") for n in nodes],
        "node_set_sizes": [(len(n.s1), len(n.s2), len(n.s3)) for n in nodes],
    }
    return PipelineResult(combined, samples, ledger, diagnostics, nodes)


def _refit(g: GPSurrogate, train: TrainingSet, cfg: PipelineConfig, seed) -> GPSurrogate:
    from ._seeding import seed_sequence
    from .gp import gp_fit

    s = seed_sequence(*seed).generate_state(1)[0]
    return gp_fit(train, cfg.fit.with_warm_start(g.hyper, cfg.refit_restarts), seed=int(s))


def baseline_ledger(data_len: int, sample_sets: list[SampleSet], with_hyperparams: bool = False) -> CommLedger:
    """Communication ledger for the traditional two-step schemes."""
    ledger = CommLedger()
    ledger.data_distribution = data_len
    D = sample_sets[0].dim
    for k, ss in enumerate(sample_sets):
        ledger.mcmc_upload += len(ss) * D
    if with_hyperparams:
        ledger.hyperparams = len(sample_sets) * HYPERPARAM_COUNT(D)
    return ledger
