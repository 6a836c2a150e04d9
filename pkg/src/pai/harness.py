"""Config-driven experiment runner.

Parses flat key/value configs, executes method x seed grids in which every
method consumes the same persisted MCMC output, computes metric reports
against cached ground truths, and emits bootstrap-marked summary tables
plus plot-ready sample files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as pio
from ._seeding import rng as _derive_rng
from .acquisition import AcquisitionConfig
from .baselines import combine_gp_baseline, combine_nonparametric, combine_parametric
from .gp import FitConfig
from .metrics import bootstrap_compare, compute_report
from .models import GroundTruth, get_model
from .pipeline import (
    PipelineConfig,
    ProposalConfig,
    SharingConfig,
    baseline_ledger,
    run_node_mcmc,
    run_pai,
)
from .sampling import ChainConfig, TargetDensity, partition_data

SUPPORTED_METHODS = ("pai", "pai-dis", "gp", "gp-dis", "parametric", "nonparametric")

FULL_BOOTSTRAP_N = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    out_dir: str
    n_obs: int = 1000
    k_partitions: int = 10
    methods: tuple = ("pai",)
    seeds: tuple = tuple(range(1, 11))
    n_metric_samples: int = 10_000
    truth_resolution: int = 0  # 0: model default
    truth_draws: int = 100_000
    share: bool = True
    refine: bool = True
    n_boot: int = 10_000
    alpha: float = 0.05
    metric_bins: int = 100
    w2_max_n: int = 512
    workers: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.k_partitions < 1:
            raise ValueError("need k_partitions >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        unknown = [m for m in self.methods if m not in SUPPORTED_METHODS]
        if unknown:
            raise ValueError(f"unsupported methods: {unknown}")
        chains = self.pipeline.chains
        if chains.n_samples < 100 * chains.n_chains:
            import warnings

            warnings.warn(
                "benchmark runs expect n_samples >= 100 * n_chains", RuntimeWarning
            )

    def canonical(self) -> str:
        parts = []

        def walk(prefix, obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
                    walk(f"{prefix}{f.name}.", getattr(obj, f.name))
            elif isinstance(obj, (tuple, list)):
                parts.append(f"{prefix[:-1]}={','.join(str(v) for v in obj)}")
            elif isinstance(obj, np.ndarray):
                parts.append(f"{prefix[:-1]}={obj.tolist()}")
            else:
                parts.append(f"{prefix[:-1]}={obj}")

        walk("", self)
        return "\n".join(p for p in sorted(parts) if not p.startswith("out_dir="))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines with # comments."""
    out: dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {i}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_list(value: str, conv):
    return tuple(conv(v.strip()) for v in value.split(",") if v.strip())


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes", "on"):
        return True
    if value.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected boolean, got {value!r}")


_KEY_SPECS = {
    "model": ("model", str),
    "data.n_obs": ("n_obs", int),
    "run.k": ("k_partitions", int),
    "run.methods": ("methods", lambda v: _parse_list(v, str)),
    "run.seeds": ("seeds", lambda v: _parse_list(v, int)),
    "run.out_dir": ("out_dir", str),
    "run.share": ("share", _parse_bool),
    "run.refine": ("refine", _parse_bool),
    "run.workers": ("workers", int),
    "metrics.n_samples": ("n_metric_samples", int),
    "metrics.n_boot": ("n_boot", int),
    "metrics.alpha": ("alpha", float),
    "metrics.bins": ("metric_bins", int),
    "metrics.w2_max_n": ("w2_max_n", int),
    "truth.resolution": ("truth_resolution", int),
    "truth.draws": ("truth_draws", int),
}

_NESTED_SPECS = {
    "sampler.n_chains": ("chains", "n_chains", int),
    "sampler.n_warmup": ("chains", "n_warmup", int),
    "sampler.n_samples": ("chains", "n_samples", int),
    "sampler.step_scale": ("chains", "step_scale", float),
    "acquisition.u": ("acquisition", "u", float),
    "acquisition.n_batch": ("acquisition", "n_batch", int),
    "acquisition.t_subsample": ("acquisition", "t_subsample", int),
    "acquisition.t_refine": ("acquisition", "t_refine", int),
    "acquisition.n_med": ("acquisition", "n_med", int),
    "sharing.density_threshold": ("sharing", "density_threshold", float),
    "sharing.lowdensity_offset": ("sharing", "lowdensity_offset", float),
    "sharing.n_share": ("sharing", "n_share", int),
    "fit.n_restarts": ("fit", "n_restarts", int),
    "fit.max_evals": ("fit", "max_evals", int),
    "fit.noise_variance": ("fit", "noise_variance", float),
    "proposal.n_oversample": ("proposal", "n_oversample", int),
    "proposal.bandwidth_frac": ("proposal", "bandwidth_frac", float),
    "proposal.max_centers_per_node": ("proposal", "max_centers_per_node", int),
    "proposal.center_offset": ("proposal", "center_offset", float),
    "proposal.mix_uniform": ("proposal", "mix_uniform", float),
}


def config_from_mapping(kv: dict[str, str], **overrides) -> ExperimentConfig:
    top: dict = {}
    nested: dict[str, dict] = {}
    for key, value in kv.items():
        if key in _KEY_SPECS:
            name, conv = _KEY_SPECS[key]
            top[name] = conv(value)
        elif key in _NESTED_SPECS:
            section, name, conv = _NESTED_SPECS[key]
            nested.setdefault(section, {})[name] = conv(value)
        elif key == "fit.refit_restarts":
            nested.setdefault("_pipeline", {})["refit_restarts"] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    pipeline = PipelineConfig(
        chains=ChainConfig(**nested.get("chains", {})),
        acquisition=AcquisitionConfig(**nested.get("acquisition", {})),
        sharing=SharingConfig(**nested.get("sharing", {})),
        fit=FitConfig(**nested.get("fit", {})),
        proposal=ProposalConfig(**nested.get("proposal", {})),
        **nested.get("_pipeline", {}),
    )
    top["pipeline"] = pipeline
    top.update(overrides)
    if "model" not in top or "out_dir" not in top:
        raise ValueError("config must define 'model' and 'run.out_dir'")
    return ExperimentConfig(**top)


def load_config(path, **overrides) -> ExperimentConfig:
    return config_from_mapping(parse_config_text(Path(path).read_text()), **overrides)


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    seed: int
    status: str = "ok"
    error: str | None = None
    metrics: dict = field(default_factory=dict)
    mmtv_per_dim: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    wallclock: dict = field(default_factory=dict)
    mcmc_hashes: tuple = ()
    config_hash: str = ""
    run_dir: str = ""

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mmtv_per_dim"] = list(self.mmtv_per_dim)
        d["mcmc_hashes"] = list(self.mcmc_hashes)
        return d

    @staticmethod
    def from_json(d: dict) -> "RunRecord":
        d = dict(d)
        d["mmtv_per_dim"] = tuple(d.get("mmtv_per_dim", ()))
        d["mcmc_hashes"] = tuple(d.get("mcmc_hashes", ()))
        return RunRecord(**d)


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    summary_rows: list[dict]
    table: str
    out_dir: str

    @property
    def failed(self) -> list[RunRecord]:
        return [r for r in self.records if r.status != "ok"]


# ---------------------------------------------------------------------------
# ground truth caching
# ---------------------------------------------------------------------------


def _truth_cache_path(out: Path, cfg: ExperimentConfig, seed: int) -> Path:
    res = cfg.truth_resolution or "def"
    return out / "truth" / f"{cfg.model}_n{cfg.n_obs}_seed{seed}_res{res}_d{cfg.truth_draws}.npz"


def load_or_build_truth(cfg: ExperimentConfig, model, data, seed: int, out: Path) -> GroundTruth:
    path = _truth_cache_path(out, cfg, seed)
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            kind = str(z["kind"])
            return GroundTruth(
                kind=kind,
                reference_draws=z["reference_draws"],
                marginal_means=z["marginal_means"],
                grid_axes=(z["g1"], z["g2"]) if kind == "grid" else None,
                log_masses=z["log_masses"] if kind == "grid" else None,
                dirichlet_alpha=z["dirichlet_alpha"] if kind == "exact" else None,
            )
    kw = {"resolution": cfg.truth_resolution} if cfg.truth_resolution else {}
    truth = model.ground_truth(data, seed=seed, n_draws=cfg.truth_draws, **kw)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": truth.kind,
        "reference_draws": truth.reference_draws,
        "marginal_means": truth.marginal_means,
    }
    if truth.kind == "grid":
        payload.update(g1=truth.grid_axes[0], g2=truth.grid_axes[1], log_masses=truth.log_masses)
    else:
        payload.update(dirichlet_alpha=truth.dirichlet_alpha)
    np.savez_compressed(path, **payload)
    return truth


# ---------------------------------------------------------------------------
# method dispatch
# ---------------------------------------------------------------------------


def _gp_train_size(cfg: ExperimentConfig, dim: int) -> int:
    acq = cfg.pipeline.acquisition.resolved(dim)
    return acq.n_med + acq.t_subsample * acq.n_batch


def run_method(cfg, model, data, partitions, sample_sets, method: str, seed: int):
    """One method on one seed's shared MCMC output -> (samples, ledger, diag, extras)."""
    K = len(partitions)
    target = TargetDensity(model.log_prior, model.log_likelihood, K, model.sample_prior)
    true_logpdfs = [
        (lambda X, pv=data.values[partitions[k]]: target.log_density(X, pv)) for k in range(K)
    ]
    n_out = cfg.n_metric_samples
    extras: dict = {}
    if method in ("pai", "pai-dis"):
        result = run_pai(
            model,
            data,
            K,
            cfg.pipeline,
            seed,
            sample_sets=sample_sets,
            partitions=partitions,
            share=cfg.share,
            refine=cfg.refine,
            dis=method == "pai-dis",
            n_out=n_out,
        )
        extras["nodes"] = result.nodes
        extras["surrogates"] = [n.surrogate for n in result.nodes]
        return result.samples, result.ledger, result.diagnostics, extras
    if method in ("gp", "gp-dis"):
        ledger = baseline_ledger(len(data), sample_sets, with_hyperparams=True)
        samples, combined, diag = combine_gp_baseline(
            sample_sets,
            train_size=_gp_train_size(cfg, sample_sets[0].dim),
            fit_cfg=cfg.pipeline.fit,
            proposal_cfg=cfg.pipeline.proposal,
            seed=(seed, 0x6B),
            n_out=n_out,
            true_logpdfs=true_logpdfs if method == "gp-dis" else None,
            ledger=ledger,
        )
        extras["surrogates"] = list(combined.surrogates)
        return samples, ledger, {"sampling": diag}, extras
    if method == "parametric":
        ga = combine_parametric([ss.points for ss in sample_sets])
        samples = ga.sample(_derive_rng(seed, 0x9A12), n_out)
        return samples, baseline_ledger(len(data), sample_sets), {}, extras
    if method == "nonparametric":
        samples = combine_nonparametric(
            [ss.points for ss in sample_sets], n_out=n_out, seed=(seed, 0x9A13)
        )
        return samples, baseline_ledger(len(data), sample_sets), {}, extras
    raise ValueError(f"unsupported method {method!r}")


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the full method x seed grid and write all artifacts.

    Every method within a seed consumes the identical persisted MCMC
    sample sets. Individual run failures are recorded and do not stop the
    grid.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.canonical() + "\n")
    model = get_model(cfg.model)
    pipe_cfg = replace(cfg.pipeline, n_workers=cfg.workers)
    records: list[RunRecord] = []

    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        try:
            data = model.generate(cfg.n_obs, seed)
            pio.write_dataset(seed_dir / "dataset.tsv", data)
            partitions = partition_data(len(data), cfg.k_partitions, (seed,))

            t0 = time.perf_counter()
            sample_sets = run_node_mcmc(model, data, partitions, pipe_cfg, seed)
            t_mcmc = time.perf_counter() - t0
            hashes = tuple(pio.sample_set_hash(ss) for ss in sample_sets)
            for k, ss in enumerate(sample_sets):
                pio.write_sample_set(seed_dir / f"node{k}_samples.tsv", ss)

            t0 = time.perf_counter()
            truth = load_or_build_truth(cfg, model, data, seed, out)
            t_truth = time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001 - shared stage failed: mark all methods
            err = f"{type(exc).__name__}: {exc}"
            tb = traceback.format_exc()
            for method in cfg.methods:
                records.append(
                    RunRecord(
                        method=method,
                        seed=seed,
                        status="failed",
                        error=err,
                        diagnostics={"traceback": tb},
                        config_hash=cfg.hash(),
                    )
                )
            continue

        for method in cfg.methods:
            rec = RunRecord(method=method, seed=seed, config_hash=cfg.hash())
            run_dir = seed_dir / method
            run_dir.mkdir(parents=True, exist_ok=True)
            rec.run_dir = str(run_dir)
            rec.mcmc_hashes = hashes
            rec.wallclock["mcmc"] = t_mcmc
            rec.wallclock["truth"] = t_truth
            try:
                t0 = time.perf_counter()
                samples, ledger, diag, extras = run_method(
                    cfg, model, data, partitions, sample_sets, method, seed
                )
                rec.wallclock["combine"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                report = compute_report(
                    model.metric_transform(samples),
                    truth.reference_draws,
                    n_bins=cfg.metric_bins,
                    w2_max_n=cfg.w2_max_n,
                    seed=seed,
                )
                rec.wallclock["metrics"] = time.perf_counter() - t0
                rec.metrics = report.row()
                rec.mmtv_per_dim = report.mmtv_per_dim
                rec.diagnostics = _jsonable(diag)
                rec.ledger = ledger.to_record()
                _persist_run(run_dir, samples, ledger, extras)
            except Exception as exc:  # noqa: BLE001 - grid must continue
                rec.status = "failed"
                rec.error = f"{type(exc).__name__}: {exc}"
                rec.diagnostics = {"traceback": traceback.format_exc()}
            pio.write_json(run_dir / "record.json", rec.to_json())
            records.append(rec)

    table, summary_rows = emit_table(records, n_boot=cfg.n_boot, alpha=cfg.alpha)
    _write_runs_tsv(out / "runs.tsv", records)
    _write_summary_tsv(out / "summary.tsv", summary_rows)
    (out / "table.txt").write_text(table + "\n")
    return ExperimentResult(records, summary_rows, table, str(out))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _persist_run(run_dir: Path, samples, ledger, extras) -> None:
    pio.write_points(run_dir / "samples.tsv", samples)
    pio.write_json(run_dir / "ledger.json", ledger.to_record())
    for k, g in enumerate(extras.get("surrogates", [])):
        pio.write_surrogate(run_dir / f"node{k}_surrogate.json", g)
    for node in extras.get("nodes", []):
        for stage in ("s1", "s2", "s3"):
            train = getattr(node, stage)
            pio.write_training_set(run_dir / f"node{node.node_id}_{stage}.tsv", train)


def _write_runs_tsv(path: Path, records: list[RunRecord]) -> None:
    lines = ["method\tseed\tstatus\tmmtv\tw2\tgskl\tledger_total"]
    for rec in sorted(records, key=lambda r: (r.seed, r.method)):
        m = rec.metrics
        lines.append(
            "\t".join(
                [
                    rec.method,
                    str(rec.seed),
                    rec.status,
                    repr(m["mmtv"]) if m else "",
                    repr(m["w2"]) if m else "",
                    repr(m["gskl"]) if m else "",
                    str(rec.ledger.get("total", "")),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _write_summary_tsv(path: Path, rows: list[dict]) -> None:
    lines = ["metric\tmethod\tmean\tsd\tn_runs\tbest"]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    row["metric"],
                    row["method"],
                    repr(row["mean"]),
                    repr(row["sd"]),
                    str(row["n_runs"]),
                    str(int(row["best"])),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def emit_table(records: list[RunRecord], n_boot: int = 10_000, alpha: float = 0.05):
    """Aligned text table plus machine rows; bootstrap-tied best per metric.

    Means that are statistically tied with the per-metric best method are
    wrapped in ``*...*`` in the text table and flagged in the rows.
    """
    ok = [r for r in records if r.status == "ok"]
    methods = sorted({r.method for r in ok})
    rows: list[dict] = []
    best_sets: dict[str, set] = {}
    for metric in ("mmtv", "w2", "gskl"):
        per_method = {
            m: [r.metrics[metric] for r in sorted(ok, key=lambda r: r.seed) if r.method == m]
            for m in methods
        }
        per_method = {m: v for m, v in per_method.items() if v}
        if not per_method:
            continue
        if all(len(v) >= 2 for v in per_method.values()):
            best = bootstrap_compare(per_method, n_boot=n_boot, alpha=alpha, seed=0)
        else:
            lowest = min(per_method, key=lambda m: float(np.mean(per_method[m])))
            best = {lowest}
        best_sets[metric] = best
        for m in methods:
            if m not in per_method:
                continue
            vals = np.asarray(per_method[m])
            rows.append(
                {
                    "metric": metric,
                    "method": m,
                    "mean": float(vals.mean()),
                    "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                    "n_runs": int(len(vals)),
                    "best": m in best,
                }
            )
    # aligned text
    header = ["method"] + [m.upper() for m in ("mmtv", "w2", "gskl")]
    table_rows = [header]
    for m in methods:
        line = [m]
        for metric in ("mmtv", "w2", "gskl"):
            row = next((r for r in rows if r["metric"] == metric and r["method"] == m), None)
            if row is None:
                line.append("-")
                continue
            cell = f"{row['mean']:.3g} +- {row['sd']:.2g}"
            if row["best"]:
                cell = f"*{cell}*"
            line.append(cell)
        table_rows.append(line)
    widths = [max(len(r[i]) for r in table_rows) for i in range(len(header))]
    text = "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table_rows
    )
    return text, rows


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

PLOT_KINDS = ("scatter2d", "marginal1d", "ternary")


def emit_plotdata(out_dir, method: str, seed: int, kind: str, dest=None) -> Path:
    """Write paired approximate/truth sample columns for offline plotting."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    out = Path(out_dir)
    cfg_kv = parse_config_text((out / "config.txt").read_text())
    model = get_model(cfg_kv["model"])
    run_dir = out / f"seed{seed}" / method
    samples = pio.read_points(run_dir / "samples.tsv")
    rec = pio.read_json(run_dir / "record.json")
    cfg = _config_for_truth(cfg_kv, out)
    data = pio.read_dataset(out / f"seed{seed}" / "dataset.tsv")
    truth = load_or_build_truth(cfg, model, data, seed, out)

    approx = model.metric_transform(samples)
    ref = truth.reference_draws
    if kind == "ternary":
        if model.name != "rare_categorical":
            raise ValueError("ternary plot data requires a simplex model")
        approx = np.column_stack([approx, 1.0 - approx.sum(axis=1)])
        ref = np.column_stack([ref, 1.0 - ref.sum(axis=1)])
    elif kind == "scatter2d" and approx.shape[1] != 2:
        raise ValueError("scatter2d requires two-dimensional samples")

    dest = Path(dest) if dest else run_dir / f"plot_{kind}.tsv"
    cols = approx.shape[1]
    lines = ["\t".join(["source"] + [f"c{i+1}" for i in range(cols)])]
    for label, pts in (("approx", approx), ("truth", ref)):
        for p in pts:
            lines.append("\t".join([label] + [repr(float(v)) for v in p]))
    dest.write_text("\n".join(lines) + "\n")
    _ = rec
    return dest


def _config_for_truth(cfg_kv: dict, out: Path) -> ExperimentConfig:
    # config.txt holds the canonical flat dump (attribute paths), which
    # carries everything the truth cache key needs
    return ExperimentConfig(
        model=cfg_kv["model"],
        out_dir=str(out),
        n_obs=int(cfg_kv["n_obs"]),
        truth_resolution=int(cfg_kv["truth_resolution"]),
        truth_draws=int(cfg_kv["truth_draws"]),
    )


def recompute_metrics(out_dir) -> list[dict]:
    """Recompute metric rows from persisted samples; verify stored values."""
    out = Path(out_dir)
    cfg_kv = parse_config_text((out / "config.txt").read_text())
    cfg = _config_for_truth(cfg_kv, out)
    model = get_model(cfg.model)
    rows = []
    for rec_path in sorted(out.glob("seed*/*/record.json")):
        rec = RunRecord.from_json(pio.read_json(rec_path))
        if rec.status != "ok":
            continue
        run_dir = rec_path.parent
        seed = rec.seed
        data = pio.read_dataset(out / f"seed{seed}" / "dataset.tsv")
        truth = load_or_build_truth(cfg, model, data, seed, out)
        samples = pio.read_points(run_dir / "samples.tsv")
        bins = int(cfg_kv.get("metric_bins", 100))
        w2n = int(cfg_kv.get("w2_max_n", 512))
        report = compute_report(
            model.metric_transform(samples),
            truth.reference_draws,
            n_bins=bins,
            w2_max_n=w2n,
            seed=seed,
        )
        match = all(
            report.row()[k] == rec.metrics[k] for k in ("mmtv", "w2", "gskl")
        )
        rows.append(
            {
                "method": rec.method,
                "seed": seed,
                **report.row(),
                "stored_match": match,
            }
        )
    return rows
