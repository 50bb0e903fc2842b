"""Config plumbing, orchestrated runs, sweeps, and the CLI surface."""

import csv
import json
import os
import time
from dataclasses import asdict

import jsonschema
import numpy as np
import pytest

from slowlab import harness
from slowlab.cli import main
from slowlab.estimators import flow_encode, load_model
from slowlab.harness import (
    DatasetSpec,
    EstimatorSpec,
    ExperimentConfig,
    MetricsSpec,
    SweepSpec,
    config_from_dict,
    config_hash,
    run,
    significance,
    sweep_alpha_identifiability,
    sweep_kappa,
    sweep_lap_histogram,
    sweep_table4,
)

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "..", "docs",
                           "config.schema.json")


def smoke_dict(out_dir, **overrides):
    base = {
        "seeds": [0],
        "dataset": {"dim": 2, "count": 4000, "mixing": "orthogonal"},
        "estimator": {"kind": "slowflow-linear", "steps": 300, "lr": 1e-2},
        "metrics": {"names": ["mcc"], "sample_size": 4000},
        "out_dir": str(out_dir),
    }
    base.update(overrides)
    return base


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# ---------------------------------------------------------------------------
# config plumbing


class TestConfig:
    def test_defaults(self):
        config = config_from_dict({})
        assert config.seeds == list(range(10))
        assert config.dataset.kind == "chain"
        assert config.estimator.gamma == 10.0
        assert config.estimator.lam == 6.0
        assert config.metrics.names == ["mcc"]

    def test_unknown_top_level_key_named(self):
        with pytest.raises(ValueError, match="wibble"):
            config_from_dict({"wibble": 1})

    def test_unknown_nested_key_named_with_section(self):
        with pytest.raises(ValueError, match=r"frob.*dataset"):
            config_from_dict({"dataset": {"frob": 2}})
        with pytest.raises(ValueError, match=r"nope.*estimator"):
            config_from_dict({"estimator": {"nope": 2}})

    @pytest.mark.parametrize("section,payload", [
        ("dataset", {"kind": "parquet"}),
        ("dataset", {"mixing": "fourier"}),
        ("dataset", {"kappa": 0.0}),
        ("dataset", {"kind": "csv"}),
        ("estimator", {"kind": "gan"}),
        ("estimator", {"steps": 0}),
        ("estimator", {"sigma_x": 0.0}),
        ("metrics", {"names": ["mcc", "dci"]}),
        ("metrics", {"correlation": "kendall"}),
        ("metrics", {"sample_sizes": {"mig": 500}}),
    ])
    def test_bad_values_rejected(self, section, payload):
        with pytest.raises(ValueError):
            config_from_dict({section: payload})

    def test_non_integer_seed_rejected(self):
        with pytest.raises(ValueError, match="integer"):
            config_from_dict({"seeds": [0.5]})

    def test_hash_ignores_key_order_but_not_values(self):
        a = config_from_dict({"seeds": [0, 1], "dataset": {"dim": 3, "lam": 2.0}})
        b = config_from_dict({"dataset": {"lam": 2.0, "dim": 3}, "seeds": [0, 1]})
        c = config_from_dict({"seeds": [0, 1], "dataset": {"dim": 3, "lam": 2.5}})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 12

    def test_per_metric_sample_size_lookup(self):
        spec = MetricsSpec(names=["mcc", "mig"], sample_size=5000,
                           sample_sizes={"mig": 2000})
        assert spec.size_for("mcc") == 5000
        assert spec.size_for("mig") == 2000


class TestSchema:
    @pytest.fixture()
    def schema(self):
        with open(SCHEMA_PATH) as fh:
            return json.load(fh)

    def test_accepts_valid_configs(self, schema):
        jsonschema.validate({}, schema)
        jsonschema.validate(smoke_dict("/tmp/x"), schema)
        jsonschema.validate({
            "dataset": {"kind": "csv", "path": "p.csv", "factors_path": "f.csv"},
            "estimator": {"kind": "slowvae", "encoder": "mlp", "latent_dim": 3},
            "metrics": {"names": ["mcc", "sap"], "sample_sizes": {"sap": 2000}},
            "sweep": {"kappas": [0.2, 1.0]},
        }, schema)

    def test_rejects_unknown_and_ill_typed(self, schema):
        for bad in (
            {"wibble": 1},
            {"dataset": {"frob": 2}},
            {"seeds": "0"},
            {"estimator": {"kind": "gan"}},
            {"metrics": {"correlation": "kendall"}},
        ):
            with pytest.raises(jsonschema.ValidationError):
                jsonschema.validate(bad, schema)

    def test_schema_defaults_match_dataclasses(self, schema):
        props = schema["properties"]
        assert props["seeds"]["default"] == list(range(10))
        for section, cls in (("dataset", DatasetSpec), ("estimator", EstimatorSpec),
                             ("metrics", MetricsSpec), ("sweep", SweepSpec)):
            declared = {k: v["default"]
                        for k, v in props[section]["properties"].items()}
            assert declared == asdict(cls()), section


# ---------------------------------------------------------------------------
# run


class TestRun:
    def test_smoke_under_budget_with_valid_record(self, tmp_path):
        config = config_from_dict(smoke_dict(tmp_path))
        start = time.monotonic()
        record = run(config)
        assert time.monotonic() - start < 60.0
        entry = record.per_seed[0]
        assert entry["error"] is None
        assert 0.0 <= entry["scores"]["mcc"] <= 100.0
        assert entry["train"]["steps"] == 300
        assert record.aggregates["mcc"]["n"] == 1
        for path in record.artifacts:
            assert os.path.exists(path)

    def test_rerun_identical_metric_values(self, tmp_path):
        config = config_from_dict(smoke_dict(tmp_path, seeds=[0, 1]))
        first = run(config)
        second = run(config)
        for a, b in zip(first.per_seed, second.per_seed):
            assert a["scores"] == b["scores"]
            assert a["train"]["final_loss"] == b["train"]["final_loss"]
        assert first.aggregates == second.aggregates

    def test_aggregates_recomputable(self, tmp_path):
        config = config_from_dict(smoke_dict(
            tmp_path, seeds=[0, 1, 2], estimator={"kind": "slowflow-linear",
                                                  "steps": 100, "lr": 1e-2}))
        record = run(config)
        values = np.array([r["scores"]["mcc"] for r in record.per_seed])
        agg = record.aggregates["mcc"]
        assert abs(agg["mean"] - values.mean()) < 1e-12
        assert abs(agg["sd"] - values.std(ddof=1)) < 1e-12
        assert agg["n"] == 3

    def test_json_and_csv_carry_identical_numbers(self, tmp_path):
        config = config_from_dict(smoke_dict(tmp_path, seeds=[0, 1]))
        record = run(config)
        json_path = next(p for p in record.artifacts if p.endswith(".json"))
        csv_path = next(p for p in record.artifacts if p.endswith(".csv"))
        stored = json.load(open(json_path))
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        by_seed = {r["seed"]: r for r in rows}
        for entry in stored["per_seed"]:
            row = by_seed[str(entry["seed"])]
            assert float(row["mcc"]) == entry["scores"]["mcc"]
            assert float(row["final_loss"]) == entry["train"]["final_loss"]
        assert float(by_seed["mean"]["mcc"]) == stored["aggregates"]["mcc"]["mean"]
        assert float(by_seed["sd"]["mcc"]) == stored["aggregates"]["mcc"]["sd"]

    def test_failing_seed_recorded_not_raised(self, tmp_path):
        config = config_from_dict(smoke_dict(
            tmp_path, metrics={"names": ["mcc"], "sample_size": 500}))
        record = run(config)
        entry = record.per_seed[0]
        assert entry["error"] is not None
        assert "1000" in entry["error"]
        assert entry["scores"] is None
        assert record.aggregates == {}

    def test_checkpoints_written_and_loadable(self, tmp_path):
        config = config_from_dict(smoke_dict(tmp_path, save_checkpoints=True))
        record = run(config)
        base = next(p for p in record.artifacts if "ckpt" in p and p.endswith(".npz"))
        base = base[: -len(".npz")]
        reloaded = load_model(base)
        obs, _ = harness._build_dataset(config.dataset, 0)
        manifest = json.load(open(base + ".json"))
        assert manifest["kind"] == "flow"
        assert manifest["seed"] == 0
        z = flow_encode(reloaded, obs.prev[:64])
        assert z.shape == (64, 2)

    def test_csv_dataset_matches_chain_dataset(self, tmp_path):
        config = config_from_dict(smoke_dict(tmp_path))
        direct = run(config)
        rc = main(["gen-data", "--config", write_config(tmp_path, smoke_dict(tmp_path)),
                   "--out", str(tmp_path), "--seed", "0"])
        assert rc == 0
        via_csv = config_from_dict(smoke_dict(tmp_path, dataset={
            "kind": "csv", "dim": 2,
            "path": str(tmp_path / "pairs-seed0.csv"),
            "factors_path": str(tmp_path / "factors-seed0.csv"),
        }))
        record = run(via_csv)
        # %.17g round trip is exact, factors pass through %.18e; training
        # consumes the same stream, so scores agree to float noise
        assert record.per_seed[0]["scores"]["mcc"] == pytest.approx(
            direct.per_seed[0]["scores"]["mcc"], abs=1e-6)

    def test_shuffle_per_factor_changes_rows_not_marginals(self):
        spec = DatasetSpec(dim=3, count=500, mixing="none")
        plain, _ = harness._build_dataset(spec, 4)
        shuffled, _ = harness._build_dataset(
            DatasetSpec(dim=3, count=500, mixing="none", shuffle_per_factor=True), 4)
        assert not np.array_equal(plain.prev, shuffled.prev)
        for k in range(3):
            assert sorted(plain.prev[:, k]) == pytest.approx(
                sorted(shuffled.prev[:, k]))

    def test_vae_run_records_posterior_diagnostics(self, tmp_path):
        config = config_from_dict(smoke_dict(
            tmp_path,
            estimator={"kind": "slowvae", "steps": 120, "lam": 1.0, "lr": 1e-2},
            dataset={"dim": 2, "count": 3000, "lam": 1.0},
            metrics={"names": ["mcc"], "sample_size": 3000}))
        record = run(config)
        entry = record.per_seed[0]
        assert entry["error"] is None
        post = entry["posterior"]
        assert len(post["mean_abs_mu"]) == 2
        assert len(post["collapsed"]) == 2
        assert all(isinstance(c, bool) for c in post["collapsed"])
        assert "decomposition" in entry["train"]


# ---------------------------------------------------------------------------
# sweeps


class TestSweeps:
    def test_significance_flag_convention(self):
        rng = np.random.default_rng(0)
        apart = significance(rng.normal(0, 1, 40), rng.normal(3, 1, 40))
        same = significance([1.0, 1.1, 0.9, 1.05], [1.02, 0.95, 1.08, 1.01])
        assert apart["significant"] and apart["p"] < 0.05
        assert not same["significant"]
        from scipy import stats
        t, p = stats.ttest_ind([1.0, 2.0, 3.0], [1.5, 2.5, 3.5])
        out = significance([1.0, 2.0, 3.0], [1.5, 2.5, 3.5])
        assert out["t"] == pytest.approx(float(t))
        assert out["p"] == pytest.approx(float(p))

    def test_lap_histogram_counts_and_files(self, tmp_path):
        payload = sweep_lap_histogram(lams=(1.0, 3.0), sizes=(6, 6, 6), count=4000,
                                      out_dir=str(tmp_path))
        assert [r["lam"] for r in payload["rows"]] == [1.0, 3.0]
        for row in payload["rows"]:
            assert sum(row["counts"]) == 4000
            assert len(row["counts"]) == 4
            assert row["frequencies"] == pytest.approx(
                [c / 4000 for c in row["counts"]])
        stored = json.load(open(tmp_path / "lap-histogram.json"))
        assert stored == payload
        with open(tmp_path / "lap-histogram.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["lam", "n_changed", "count"]
        assert len(rows) == 1 + 2 * 4

    def test_lap_histogram_tighter_lam_changes_fewer(self, tmp_path):
        payload = sweep_lap_histogram(lams=(1.0, 8.0), sizes=(8, 8, 8, 8),
                                      count=6000, out_dir=str(tmp_path))
        mean_changed = [
            sum(k * c for k, c in enumerate(r["counts"])) / 6000
            for r in payload["rows"]
        ]
        assert mean_changed[1] < mean_changed[0]

    def test_alpha_sweep_smoke(self, tmp_path):
        payload = sweep_alpha_identifiability(alphas=(1.0,), seeds=(0,), dims=2,
                                              steps=200, count=3000,
                                              out_dir=str(tmp_path))
        row = payload["rows"][0]
        assert row["alpha"] == 1.0
        assert row["mcc"]["n"] == 1
        assert row["mcc"]["mean"] > 90.0
        assert os.path.exists(tmp_path / "alpha.json")
        assert os.path.exists(tmp_path / "alpha.csv")

    def test_kappa_sweep_smoke(self, tmp_path):
        payload = sweep_kappa(kappas=(1.0,), seeds=(0,), steps=150, count=3000,
                              out_dir=str(tmp_path))
        row = payload["rows"][0]
        assert row["kappa"] == 1.0
        assert row["slowvae"] is not None and row["slowflow"] is not None
        assert 0.0 <= row["collapse_rate"] <= 1.0
        assert len(row["posterior"]) == 1
        assert len(row["slowvae_final_loss"]) == 1
        assert payload["lam"] == 1.0

    def test_table4_sweep_smoke(self, tmp_path):
        payload = sweep_table4(dims=3, l_values=(1,), seeds=(0, 1), steps=120,
                               count=3000, hidden=8, n_blocks=2,
                               out_dir=str(tmp_path))
        row = payload["rows"][0]
        assert row["mixing_layers"] == 1
        assert row["slowflow"]["n"] == 2
        assert row["pcl"]["n"] == 2
        assert set(row["comparison"]) == {"t", "p", "significant"}
        with open(tmp_path / "table4.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "mixing_layers"
        stored = json.load(open(tmp_path / "table4.json"))
        assert stored["rows"][0]["slowflow"]["mean"] == row["slowflow"]["mean"]


# ---------------------------------------------------------------------------
# cli


class TestCli:
    def test_missing_config_file_exit_2(self, tmp_path, capsys):
        rc = main(["run", "--config", str(tmp_path / "missing.json")])
        assert rc == 2
        assert "missing.json" in capsys.readouterr().err

    def test_invalid_json_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == 2

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        path = write_config(tmp_path, {"dataset": {"bogus": 1}})
        assert main(["run", "--config", str(path)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_run_requires_config(self, capsys):
        assert main(["run"]) == 2
        assert "--config" in capsys.readouterr().err

    def test_no_subcommand_exit_2(self):
        assert main([]) == 2

    def test_run_success(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke_dict(tmp_path))
        assert main(["run", "--config", path]) == 0
        out = capsys.readouterr().out
        assert "seed 0" in out and "mcc" in out

    def test_run_json_format(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke_dict(tmp_path))
        assert main(["run", "--config", path, "--format", "json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["per_seed"][0]["scores"]["mcc"] > 0

    def test_run_all_seeds_failed_exit_1(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke_dict(
            tmp_path, metrics={"names": ["mcc"], "sample_size": 10}))
        assert main(["run", "--config", path]) == 1
        assert "all seeds failed" in capsys.readouterr().err

    def test_out_dir_env_var(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(harness.OUT_DIR_ENV, str(tmp_path / "envout"))
        data = smoke_dict(tmp_path)
        del data["out_dir"]
        assert main(["run", "--config", write_config(tmp_path, data)]) == 0
        assert any(p.startswith("record-")
                   for p in os.listdir(tmp_path / "envout"))

    def test_gen_data_and_eval_round_trip(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke_dict(tmp_path))
        assert main(["gen-data", "--config", path, "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        factors = str(tmp_path / "factors-seed0.csv")
        assert main(["eval", "--latents", factors, "--factors", factors,
                     "--metrics", "mcc", "--format", "json"]) == 0
        scores = json.loads(capsys.readouterr().out)
        assert scores["mcc"] == pytest.approx(100.0)

    def test_eval_rejects_unknown_metric(self, tmp_path, capsys):
        factors = tmp_path / "f.csv"
        np.savetxt(factors, np.random.default_rng(0).normal(size=(1200, 2)),
                   delimiter=",")
        rc = main(["eval", "--latents", str(factors), "--factors", str(factors),
                   "--metrics", "dci"])
        assert rc == 2
        assert "dci" in capsys.readouterr().err

    def test_train_saves_checkpoint(self, tmp_path, capsys):
        path = write_config(tmp_path, smoke_dict(tmp_path))
        assert main(["train", "--config", path, "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert "seed 3" in out
        ckpts = [p for p in os.listdir(tmp_path) if p.startswith("ckpt-")]
        assert any(p.endswith(".npz") for p in ckpts)
        assert any(p.endswith(".json") for p in ckpts)

    def test_fit_stats_text_and_json(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        lines = ["sequence_id,object_id,frame,time_s,cx,cy,area"]
        for obj in range(30):
            cx, cy, area = 50.0, 50.0, 5e3
            for f in range(25):
                lines.append(f"s,{obj},{f},{f / 30:.6f},{cx:.4f},{cy:.4f},{area:.4f}")
                cx += rng.laplace()
                cy += rng.laplace()
                area += 5.0 * rng.laplace()
        fixture = tmp_path / "tracks.csv"
        fixture.write_text("\n".join(lines) + "\n")
        assert main(["fit-stats", "--input", str(fixture)]) == 0
        text = capsys.readouterr().out
        assert "transitions: 720" in text
        assert "gen-laplace" in text and "gaussian" in text and "laplace" in text
        assert main(["fit-stats", "--input", str(fixture), "--format", "json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report["columns"]) == {"dx", "dy", "darea"}
        assert report["count"] == 720

    def test_fit_stats_missing_input_exit_2(self, tmp_path):
        assert main(["fit-stats", "--input", str(tmp_path / "nope.csv")]) == 2

    def test_sweep_lap_histogram_cli(self, tmp_path, capsys):
        rc = main(["sweep", "lap-histogram", "--lambda", "2", "--count", "2000",
                   "--out", str(tmp_path), "--smoke", "--format", "json"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["rows"][0]["lam"] == 2.0
        assert sum(payload["rows"][0]["counts"]) == 2000

    def test_gradcheck_exit_0(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        for name in ("slowflow-linear", "slowflow-coupling", "slowvae", "pcl"):
            assert f"{name}:" in out
        assert "FAIL" not in out
