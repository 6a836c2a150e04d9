import numpy as np
import pytest

from pai import io as pio
from pai.cli import main as cli_main
from pai.harness import (
    RunRecord,
    config_from_mapping,
    emit_table,
    load_config,
    parse_config_text,
    recompute_metrics,
    run_experiment,
)
from pai.metrics import bootstrap_compare, mmtv_per_dim

SMALL_CONFIG = """
# small grid used by the test suite
model = multimodal
data.n_obs = 100
run.k = 2
run.methods = pai, parametric
run.seeds = 1, 2
metrics.n_samples = 1500
metrics.n_boot = 500
truth.resolution = 150
truth.draws = 20000
sampler.n_chains = 2
sampler.n_warmup = 200
sampler.n_samples = 300
acquisition.n_med = 20
acquisition.t_subsample = 3
acquisition.n_batch = 2
acquisition.t_refine = 3
fit.n_restarts = 2
fit.max_evals = 60
proposal.n_oversample = 10
"""


def small_config(out_dir, **overrides):
    kv = parse_config_text(SMALL_CONFIG)
    kv["run.out_dir"] = str(out_dir)
    return config_from_mapping(kv, **overrides)


@pytest.fixture(scope="session")
def small_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = small_config(out)
    result = run_experiment(cfg)
    return cfg, result


class TestConfig:
    def test_parse_and_defaults(self, tmp_path):
        cfg = small_config(tmp_path)
        assert cfg.model == "multimodal"
        assert cfg.methods == ("pai", "parametric")
        assert cfg.seeds == (1, 2)
        assert cfg.pipeline.chains.n_chains == 2
        assert cfg.pipeline.acquisition.t_refine == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_mapping({"model": "multimodal", "run.out_dir": "x", "bogus.key": "1"})

    def test_unknown_method_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unsupported methods"):
            small_config(tmp_path, methods=("nope",))

    def test_duplicate_seeds_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="distinct"):
            small_config(tmp_path, seeds=(1, 1))

    def test_hash_ignores_out_dir(self, tmp_path):
        a = small_config(tmp_path / "a")
        b = small_config(tmp_path / "b")
        assert a.hash() == b.hash()

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(SMALL_CONFIG + f"\nrun.out_dir = {tmp_path}/out\n")
        cfg = load_config(path)
        assert cfg.n_obs == 100


class TestRunExperiment:
    def test_grid_shape_and_status(self, small_experiment):
        _, result = small_experiment
        assert len(result.records) == 4
        assert all(r.status == "ok" for r in result.records)
        assert not result.failed

    def test_fairness_same_mcmc_hashes(self, small_experiment):
        _, result = small_experiment
        by_seed = {}
        for rec in result.records:
            by_seed.setdefault(rec.seed, set()).add(rec.mcmc_hashes)
        for seed, hashes in by_seed.items():
            assert len(hashes) == 1

    def test_summary_mean_matches_records(self, small_experiment):
        _, result = small_experiment
        for row in result.summary_rows:
            vals = [
                r.metrics[row["metric"]]
                for r in result.records
                if r.method == row["method"] and r.status == "ok"
            ]
            assert abs(row["mean"] - np.mean(vals)) < 1e-12

    def test_artifacts_on_disk(self, small_experiment):
        cfg, result = small_experiment
        from pathlib import Path

        out = Path(cfg.out_dir)
        assert (out / "runs.tsv").exists()
        assert (out / "summary.tsv").exists()
        assert (out / "table.txt").exists()
        assert (out / "seed1" / "dataset.tsv").exists()
        assert (out / "seed1" / "node0_samples.tsv").exists()
        assert (out / "seed1" / "pai" / "samples.tsv").exists()
        assert (out / "seed1" / "pai" / "node0_s3.tsv").exists()
        assert (out / "seed1" / "pai" / "node1_surrogate.json").exists()

    def test_metrics_recompute_to_equality(self, small_experiment):
        cfg, _ = small_experiment
        rows = recompute_metrics(cfg.out_dir)
        assert len(rows) == 4
        assert all(r["stored_match"] for r in rows)

    def test_determinism_byte_identical(self, tmp_path):
        from pathlib import Path

        cfg_a = small_config(tmp_path / "a", seeds=(3,), methods=("parametric",))
        cfg_b = small_config(tmp_path / "b", seeds=(3,), methods=("parametric",))
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        for name in ("runs.tsv", "summary.tsv", "table.txt"):
            assert (Path(cfg_a.out_dir) / name).read_bytes() == (
                Path(cfg_b.out_dir) / name
            ).read_bytes()

    def test_failures_recorded_not_raised(self, tmp_path):
        # more partitions than observations: the shared stage fails, the
        # failure is recorded per method and per seed instead of raising
        cfg = small_config(
            tmp_path / "f",
            seeds=(4, 5),
            methods=("parametric",),
            k_partitions=200,
            n_metric_samples=500,
        )
        result = run_experiment(cfg)
        assert len(result.failed) == 2
        assert all(r.error for r in result.failed)


class TestEmitTable:
    def _records(self, data):
        recs = []
        for method, vals in data.items():
            for seed, v in enumerate(vals):
                recs.append(
                    RunRecord(
                        method=method,
                        seed=seed,
                        metrics={"mmtv": v, "w2": v, "gskl": v},
                    )
                )
        return recs

    def test_single_method_best(self):
        text, rows = emit_table(self._records({"pai": [0.1, 0.2, 0.3]}), n_boot=200)
        assert all(r["best"] for r in rows)
        assert "*" in text

    def test_dominant_method_only_best(self):
        text, rows = emit_table(
            self._records({"a": [0.0, 0.0, 0.0], "b": [1.0, 1.0, 1.0]}), n_boot=200
        )
        assert all(r["best"] == (r["method"] == "a") for r in rows)

    def test_agrees_with_bootstrap_compare(self):
        data = {"a": [0.1, 0.2, 0.15, 0.12], "b": [0.13, 0.18, 0.16, 0.11], "c": [2.0, 2.1, 1.9, 2.2]}
        _, rows = emit_table(self._records(data), n_boot=2000, alpha=0.05)
        want = bootstrap_compare(data, n_boot=2000, alpha=0.05, seed=0)
        got = {r["method"] for r in rows if r["metric"] == "mmtv" and r["best"]}
        assert got == want


class TestPlotData:
    def test_scatter2d(self, small_experiment):
        cfg, _ = small_experiment
        from pai.harness import emit_plotdata

        dest = emit_plotdata(cfg.out_dir, "pai", 1, "scatter2d")
        lines = dest.read_text().splitlines()
        approx_rows = [l for l in lines[1:] if l.startswith("approx")]
        truth_rows = [l for l in lines[1:] if l.startswith("truth")]
        assert len(approx_rows) == cfg.n_metric_samples
        assert len(truth_rows) == cfg.truth_draws

    def test_marginal1d_reproduces_metric_inputs(self, small_experiment):
        cfg, _ = small_experiment
        from pathlib import Path

        from pai.harness import emit_plotdata

        dest = emit_plotdata(cfg.out_dir, "pai", 1, "marginal1d")
        rows = [l.split("\t") for l in dest.read_text().splitlines()[1:]]
        approx = np.array([[float(v) for v in r[1:]] for r in rows if r[0] == "approx"])
        truth = np.array([[float(v) for v in r[1:]] for r in rows if r[0] == "truth"])
        # histogramming the emitted columns equals the metrics-module marginals
        samples = pio.read_points(Path(cfg.out_dir) / "seed1" / "pai" / "samples.tsv")
        want = mmtv_per_dim(samples, truth)
        got = mmtv_per_dim(approx, truth)
        assert np.array_equal(got, want)

    def test_ternary_requires_simplex_model(self, small_experiment):
        cfg, _ = small_experiment
        from pai.harness import emit_plotdata

        with pytest.raises(ValueError, match="simplex"):
            emit_plotdata(cfg.out_dir, "pai", 1, "ternary")


class TestCli:
    def test_run_and_metrics_commands(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(
            SMALL_CONFIG.replace("run.seeds = 1, 2", "run.seeds = 5").replace(
                "run.methods = pai, parametric", "run.methods = parametric"
            )
            + f"\nrun.out_dir = {tmp_path}/out\n"
        )
        code = cli_main(["run", "--config", str(cfg_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "parametric" in out
        code = cli_main(["metrics", "--run-dir", str(tmp_path / "out")])
        out = capsys.readouterr().out
        assert code == 0
        assert "True" in out
        code = cli_main(["table", "--run-dirs", str(tmp_path / "out")])
        assert code == 0

    def test_cli_overrides(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(SMALL_CONFIG + f"\nrun.out_dir = {tmp_path}/o1\n")
        code = cli_main(
            [
                "run",
                "--config",
                str(cfg_path),
                "--method",
                "pai",
                "--seed",
                "6",
                "--out-dir",
                str(tmp_path / "o2"),
                "--no-refine",
            ]
        )
        assert code == 0
        rec = pio.read_json(tmp_path / "o2" / "seed6" / "pai" / "record.json")
        assert rec["status"] == "ok"
        s2 = pio.read_training_set(tmp_path / "o2" / "seed6" / "pai" / "node0_s2.tsv")
        s3 = pio.read_training_set(tmp_path / "o2" / "seed6" / "pai" / "node0_s3.tsv")
        assert np.array_equal(s2.inputs, s3.inputs)  # refinement disabled
