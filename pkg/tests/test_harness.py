from __future__ import annotations

import hashlib
import json

import pytest

from hybridmp import ConfigError
from hybridmp.cli import main
from hybridmp.harness import (
    ExperimentConfig,
    run_suite,
    validate_spec_file,
    write_error,
)

DEFAULT_SPEC = {
    "a1": 0.5, "a2": -0.5, "b1": 1.0, "b2": 0.5, "sigma": 0.3,
    "Q1": 1.0, "Q2": 1.0, "R1": 1.0, "R2": 2.0, "G1": 1.0, "G2": 1.0,
    "lambda1": 1.0, "lambda2": 1.0, "T": 1.0, "x0": 1.0, "pi0": 0.5,
}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("HYBRIDMP_SEED", "HYBRIDMP_WORKERS", "HYBRIDMP_OUT"):
        monkeypatch.delenv(name, raising=False)


def _write_config(tmp_path, name="cfg.json", **overrides):
    doc = {"suite": "filter-check", "spec": DEFAULT_SPEC, "n_steps": 200,
           "n_paths": 150, "out": str(tmp_path / "out")}
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def _sha256(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestExperimentConfig:
    def test_rejects_unknown_suite(self, lq):
        with pytest.raises(ConfigError, match="suite"):
            ExperimentConfig(suite="everything", spec=lq)

    def test_rejects_tiny_grids_and_ensembles(self, lq):
        with pytest.raises(ConfigError, match="n_steps"):
            ExperimentConfig(suite="filter-check", spec=lq, n_steps=5)
        with pytest.raises(ConfigError, match="n_paths"):
            ExperimentConfig(suite="filter-check", spec=lq, n_paths=50)

    def test_nonpositive_workers_resolve_to_cpu_count(self, lq):
        cfg = ExperimentConfig(suite="filter-check", spec=lq, workers=0)
        assert cfg.workers >= 1

    def test_from_file_reads_inline_spec(self, tmp_path):
        path = _write_config(tmp_path, seed=7)
        cfg = ExperimentConfig.from_file(str(path))
        assert cfg.suite == "filter-check"
        assert cfg.seed == 7
        assert cfg.spec.a == (0.5, -0.5)

    def test_from_file_resolves_spec_relative_to_config(self, tmp_path):
        (tmp_path / "specs").mkdir()
        (tmp_path / "specs" / "s.json").write_text(json.dumps(DEFAULT_SPEC),
                                                   encoding="utf-8")
        path = _write_config(tmp_path, spec="specs/s.json")
        cfg = ExperimentConfig.from_file(str(path))
        assert cfg.spec.sigma == 0.3

    def test_seed_defaults_to_42(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(tmp_path)))
        assert cfg.seed == 42

    def test_env_overrides_file(self, tmp_path, monkeypatch):
        path = _write_config(tmp_path, seed=7)
        monkeypatch.setenv("HYBRIDMP_SEED", "11")
        assert ExperimentConfig.from_file(str(path)).seed == 11

    def test_cli_argument_overrides_env_and_file(self, tmp_path,
                                                 monkeypatch):
        path = _write_config(tmp_path, seed=7)
        monkeypatch.setenv("HYBRIDMP_SEED", "11")
        assert ExperimentConfig.from_file(str(path), seed=23).seed == 23

    def test_out_dir_precedence(self, tmp_path, monkeypatch):
        path = _write_config(tmp_path)
        monkeypatch.setenv("HYBRIDMP_OUT", "envdir")
        assert ExperimentConfig.from_file(str(path)).out_dir == "envdir"
        assert ExperimentConfig.from_file(str(path), out="clidir").out_dir \
            == "clidir"

    def test_malformed_json_raises_config_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON"):
            ExperimentConfig.from_file(str(path))

    def test_missing_spec_raises(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"suite": "filter-check"}),
                        encoding="utf-8")
        with pytest.raises(ConfigError, match="spec"):
            ExperimentConfig.from_file(str(path))


class TestRunSuite:
    def test_filter_check_writes_contracted_outputs(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, tolerances={"qv_error": 0.2})))
        code = run_suite(cfg)
        out = tmp_path / "out"
        results = json.loads((out / "results.json").read_text())
        assert code == 0
        assert results["pass"] is True
        assert results["suite"] == "filter-check"
        assert results["seed"] == 42
        assert set(results["metrics"]) == {
            "tower_property_z", "qv_error", "ks_zakai_sup_gap",
            "oracle_rmse_ratio"}
        for m in results["metrics"].values():
            assert set(m) == {"value", "tolerance", "comparator", "pass"}
        assert results["grid"] == {"n_steps": 200, "n_paths": 150}
        assert "workers" not in results
        assert results["spec"]["a1"] == 0.5

    def test_manifest_hashes_match_files(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, tolerances={"qv_error": 0.2})))
        run_suite(cfg)
        out = tmp_path / "out"
        manifest = json.loads((out / "manifest.json").read_text())
        assert "results.json" in manifest
        for name, digest in manifest.items():
            assert _sha256(out / name) == digest

    def test_impossible_tolerance_fails_suite(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, tolerances={"qv_error": 1e-9})))
        assert run_suite(cfg) == 1
        results = json.loads(
            (tmp_path / "out" / "results.json").read_text())
        assert results["pass"] is False
        assert results["metrics"]["qv_error"]["pass"] is False

    def test_spec_violation_writes_error_and_exits_2(self, tmp_path):
        bad = dict(DEFAULT_SPEC, a1=1e9)
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, spec=bad)))
        assert run_suite(cfg) == 2
        out = tmp_path / "out"
        err = json.loads((out / "error.json").read_text())
        assert err["error"] == "ConfigError"
        assert not (out / "results.json").exists()

    def test_results_identical_across_worker_counts(self, tmp_path):
        digests = []
        for workers in (1, 3):
            out = tmp_path / f"w{workers}"
            cfg = ExperimentConfig.from_file(
                str(_write_config(tmp_path, name=f"cfg{workers}.json",
                                  out=str(out),
                                  tolerances={"qv_error": 0.2})),
                workers=workers)
            run_suite(cfg)
            digests.append(_sha256(out / "results.json"))
        assert digests[0] == digests[1]

    def test_lq_solve_emits_trace_and_surface(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, suite="lq-solve", n_steps=50, n_paths=512,
            tolerances={"cost_mean": 2.0})))
        code = run_suite(cfg)
        out = tmp_path / "out"
        results = json.loads((out / "results.json").read_text())
        assert code == 0
        assert set(results["metrics"]) == {
            "converged", "cost_mean", "stationarity_ratio",
            "bsde_tail_r2_min"}
        trace = (out / "trace.csv").read_text().strip().splitlines()
        assert trace[0] == "iter,cost,SE,residual,sup_control_change"
        assert len(trace) >= 2
        assert (out / "control_surface.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"results.json", "trace.csv",
                "control_surface.csv"} <= set(manifest)

    def test_convergence_sweep_emits_table(self, tmp_path):
        cfg = ExperimentConfig.from_file(str(_write_config(
            tmp_path, suite="convergence-sweep", n_paths=100)))
        code = run_suite(cfg)
        out = tmp_path / "out"
        assert code in (0, 1)
        rows = (out / "sweep.csv").read_text().strip().splitlines()
        assert rows[0] == "n_steps,oracle_rmse,cost_mean,cost_se"
        assert [r.split(",")[0] for r in rows[1:]] == \
            ["250", "500", "1000", "2000"]


class TestValidateSpecFile:
    def test_clean_spec(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(DEFAULT_SPEC), encoding="utf-8")
        code, messages = validate_spec_file(str(path))
        assert code == 0
        assert messages == ["spec OK"]

    def test_violations_exit_1(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(dict(DEFAULT_SPEC, a1=1e9)),
                        encoding="utf-8")
        code, messages = validate_spec_file(str(path))
        assert code == 1
        assert any("b_x" in m for m in messages)

    def test_unreadable_exit_2(self, tmp_path):
        code, messages = validate_spec_file(str(tmp_path / "absent.json"))
        assert code == 2


class TestCli:
    def test_run_pass(self, tmp_path, capsys):
        path = _write_config(tmp_path, tolerances={"qv_error": 0.2})
        assert main(["run", "--config", str(path)]) == 0
        assert "pass" in capsys.readouterr().out

    def test_run_seed_flag_lands_in_results(self, tmp_path):
        path = _write_config(tmp_path, tolerances={"qv_error": 0.2})
        main(["run", "--config", str(path), "--seed", "5"])
        results = json.loads(
            (tmp_path / "out" / "results.json").read_text())
        assert results["seed"] == 5

    def test_run_bad_config_returns_2_and_writes_error(self, tmp_path,
                                                       capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        out = tmp_path / "errout"
        assert main(["run", "--config", str(path),
                     "--out", str(out)]) == 2
        assert (out / "error.json").exists()
        assert "error" in capsys.readouterr().err

    def test_validate_subcommand_codes(self, tmp_path):
        good = tmp_path / "good.json"
        good.write_text(json.dumps(DEFAULT_SPEC), encoding="utf-8")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(dict(DEFAULT_SPEC, a1=1e9)),
                       encoding="utf-8")
        assert main(["validate", "--spec", str(good)]) == 0
        assert main(["validate", "--spec", str(bad)]) == 1
        assert main(["validate", "--spec",
                     str(tmp_path / "none.json")]) == 2


class TestWriteError:
    def test_document_shape(self, tmp_path):
        write_error(str(tmp_path / "o"), ConfigError("boom"))
        doc = json.loads((tmp_path / "o" / "error.json").read_text())
        assert doc == {"error": "ConfigError", "message": "boom"}
