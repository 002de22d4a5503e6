import csv
import json

import numpy as np
import pytest

from bnn_sbi.runner import (
    ArtifactError,
    ConfigError,
    ExperimentConfig,
    ResultRow,
    SweepConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_sweep,
    cmd_train,
    cmd_tune_prior,
    load_model,
    main,
    median_rows,
    read_results,
    upsert_result,
)
from bnn_sbi.simulators import Dataset

TINY = dict(epochs=3, hidden_layers=1, hidden_units=8, n_test=20, grid_resolution=20, mc_samples=5,
            n_decompose=4, n_members=2, tuning_iters=5, tuning_n_func=4, tuning_n_measure=8)


def tiny(tmp_path, **kw):
    return ExperimentConfig(**{**TINY, "data_dir": str(tmp_path), "budget": 16, **kw})


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"simulator": "two_moons", "bogus": 1})
    with pytest.raises(ConfigError, match="prior_path"):
        ExperimentConfig(method="bnn")
    with pytest.raises(ConfigError):
        ExperimentConfig(method="laplace")
    with pytest.raises(ConfigError):
        ExperimentConfig(estimator="nsf")
    with pytest.raises(ConfigError):
        ExperimentConfig(seed=1_000_000)
    with pytest.raises(ConfigError):
        ExperimentConfig(budget=0)
    with pytest.raises(ValueError):
        ExperimentConfig(simulator="nope")
    assert ExperimentConfig(method="map", temperature=0.01).temperature == 1.0


def test_config_hash_and_run_name():
    a = ExperimentConfig(method="bnn", temperature=0.01, prior_path="p.json", budget=32, seed=2)
    assert a.run_name == "two_moons_npe-mdn_bnn_T0.01_n32_s2"
    assert a.config_hash() == ExperimentConfig.from_dict(a.to_dict()).config_hash()
    assert a.config_hash() != ExperimentConfig(method="bnn", prior_path="p.json", budget=32, seed=2).config_hash()


def test_data_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SBI_DATA_DIR", str(tmp_path))
    assert ExperimentConfig().root == tmp_path


def test_generate_counts_and_disjoint_test_set(tmp_path):
    cfg = tiny(tmp_path, budget=64)
    train, test = cmd_generate(cfg)
    tr, te = Dataset.load(train), Dataset.load(test)
    assert len(tr) == 64 and len(te) == 20
    assert not np.isin(tr.thetas[:, 0], te.thetas[:, 0]).any()
    meta = json.loads(train.with_suffix(".json").read_text())
    assert meta["config"]["budget"] == 64 and meta["code_version"].startswith("bnn_sbi")


def test_generate_refuses_overwrite_and_is_byte_stable(tmp_path):
    cfg = tiny(tmp_path)
    train, _ = cmd_generate(cfg)
    first = train.read_bytes()
    with pytest.raises(ArtifactError, match="overwrite"):
        cmd_generate(cfg)
    cmd_generate(cfg, force=True)
    assert train.read_bytes() == first


def test_train_needs_data_and_evaluate_needs_model(tmp_path):
    cfg = tiny(tmp_path)
    with pytest.raises(ArtifactError, match="generate"):
        cmd_train(cfg)
    cmd_generate(cfg)
    with pytest.raises(ArtifactError, match="train"):
        cmd_evaluate(cfg)
    with pytest.raises(ConfigError):
        cmd_train(tiny(tmp_path, method="prior"))


@pytest.mark.parametrize("method,estimator", [("map", "npe-mdn"), ("ensemble", "npe-mdn"), ("map", "nre")])
def test_pipeline_writes_outputs(tmp_path, method, estimator):
    cfg = tiny(tmp_path, method=method, estimator=estimator)
    cmd_generate(cfg)
    cmd_train(cfg)
    row = cmd_evaluate(cfg, posterior_grid=0, decompose=method == "ensemble")
    out = cfg.results_dir
    cov = rows_of(out / f"{cfg.run_name}_coverage.csv")
    assert cov[0] == ["alpha", "ec"] and len(cov) == 102
    grid = rows_of(out / f"{cfg.run_name}_posterior_grid_0.csv")
    assert grid[0] == ["theta_0", "theta_1", "density"] and len(grid) == 1 + 20 * 20
    mass = sum(float(r[2]) for r in grid[1:]) * (2 / 20) ** 2
    assert mass == pytest.approx(1.0, rel=1e-9)
    if method == "ensemble":
        unc = rows_of(out / f"{cfg.run_name}_uncertainty.csv")
        assert unc[0] == ["predictive_entropy", "aleatoric", "epistemic"]
        assert float(unc[1][2]) >= -1e-9
    results = read_results(cfg.results_csv)
    assert len(results) == 1 and results[0]["method"] == method
    assert float(results[0]["coverage_auc"]) == row.coverage_auc
    assert "wall_time_seconds" not in results[0]
    timing = json.loads((out / f"{cfg.run_name}_timing.json").read_text())
    assert timing["wall_time_seconds"] > 0


def test_posterior_grid_index_checked(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    with pytest.raises(ConfigError):
        cmd_evaluate(cfg, posterior_grid=20)


def test_prior_pseudo_model(tmp_path):
    cfg = tiny(tmp_path, method="prior")
    cmd_generate(cfg)
    row = cmd_evaluate(cfg)
    assert row.nominal_log_prob == pytest.approx(np.log(0.25), abs=1e-12)
    assert abs(row.coverage_auc) < 1e-12
    with pytest.raises(ConfigError):
        cmd_evaluate(cfg, decompose=True)


def test_tune_train_evaluate_bnn(tmp_path):
    cfg = tiny(tmp_path, method="bnn", prior_path="priors/tm.json")
    _, curve = cmd_tune_prior(cfg)
    assert cfg.prior_file.exists()
    assert len(rows_of(cfg.prior_file.with_name("tm_coverage.csv"))) == 102
    with pytest.raises(ArtifactError):
        cmd_tune_prior(cfg)
    cmd_generate(cfg)
    cmd_train(cfg)
    model = load_model(cfg)
    assert model.n_members == 5
    row = cmd_evaluate(cfg, decompose=True)
    assert np.isfinite(row.nominal_log_prob)


def test_prior_dimension_mismatch(tmp_path):
    tm = tiny(tmp_path, method="bnn", prior_path="priors/tm.json")
    cmd_tune_prior(tm)
    slcp = tiny(tmp_path, simulator="slcp", method="bnn", prior_path="priors/tm.json")
    cmd_generate(slcp)
    with pytest.raises(ArtifactError, match="dims"):
        cmd_train(slcp)


def test_model_method_mismatch(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    cfg.model_path.rename(tiny(tmp_path, method="ensemble").model_path)
    with pytest.raises(ArtifactError, match="method"):
        load_model(tiny(tmp_path, method="ensemble"))


def test_upsert_replaces_and_sorts(tmp_path):
    path = tmp_path / "r.csv"
    upsert_result(path, ResultRow("two_moons", "npe-mdn", "map", 1.0, 128, 1, -1.0, 0.1))
    upsert_result(path, ResultRow("two_moons", "npe-mdn", "map", 1.0, 32, 0, -2.0, 0.2))
    upsert_result(path, ResultRow("two_moons", "npe-mdn", "map", 1.0, 128, 1, -0.5, 0.3))
    rows = read_results(path)
    assert [r["budget"] for r in rows] == ["32", "128"]
    assert rows[1]["nominal_log_prob"] == "-0.5"


def test_median_rows():
    rows = [ResultRow("slcp", "nre", "map", 1.0, 32, s, v, -v) for s, v in enumerate([3.0, 1.0, 2.0])]
    (m,) = median_rows(rows)
    assert m[5] == "3" and float(m[6]) == 2.0 and float(m[7]) == -2.0


def test_default_sweep_grid():
    sweep = SweepConfig.from_dict({"base": {"simulator": "two_moons", "prior_path": "p.json"}})
    cells = sweep.cells()
    assert len(cells) == 48
    assert len({c.run_name for c in cells}) == 48
    with pytest.raises(ConfigError):
        SweepConfig.from_dict({"base": {}, "extra": 1})
    with pytest.raises(ConfigError):
        SweepConfig.from_dict({"budgets": [8]})
    with pytest.raises(ConfigError):
        SweepConfig.from_dict({"base": {}, "methods": [{"method": "map", "lr": 1}]})


def small_sweep(tmp_path, prior="priors/tm.json"):
    return SweepConfig.from_dict({
        "base": {**TINY, "data_dir": str(tmp_path), "prior_path": prior},
        "budgets": [8, 16], "methods": [{"method": "map"}, {"method": "bnn", "temperature": 1.0}],
        "seeds": [0, 1]})


def test_sweep_runs_resumes_and_aggregates(tmp_path):
    cmd_tune_prior(tiny(tmp_path, method="prior", prior_path="priors/tm.json"))
    sweep = small_sweep(tmp_path)
    rows = cmd_sweep(sweep)
    assert len(rows) == 8
    results = read_results(tmp_path / "results" / "results.csv")
    assert len(results) == 8
    medians = rows_of(tmp_path / "results" / "results_medians.csv")
    assert len(medians) == 1 + 4 and all(r[5] == "2" for r in medians[1:])
    for r in medians[1:]:
        vals = [float(x["coverage_auc"]) for x in results
                if x["method"] == r[2] and x["budget"] == r[4]]
        assert float(r[7]) == pytest.approx(np.median(vals), rel=1e-15)
    assert len(rows_of(tmp_path / "results" / "results_failures.csv")) == 1
    models = sorted((tmp_path / "models").iterdir())
    stamps = [p.stat().st_mtime_ns for p in models]
    again = cmd_sweep(sweep)
    assert [r.coverage_auc for r in again] == [r.coverage_auc for r in rows]
    assert [p.stat().st_mtime_ns for p in models] == stamps


def test_sweep_redoes_bnn_cells_after_prior_change(tmp_path):
    cfg = tiny(tmp_path, method="prior", prior_path="priors/tm.json")
    cmd_tune_prior(cfg)
    sweep = small_sweep(tmp_path)
    cmd_sweep(sweep)
    bnn_model = next(p for p in (tmp_path / "models").iterdir() if "_bnn_" in p.name)
    map_model = next(p for p in (tmp_path / "models").iterdir() if "_map_" in p.name)
    before = bnn_model.stat().st_mtime_ns, map_model.stat().st_mtime_ns
    cmd_tune_prior(ExperimentConfig(**{**cfg.to_dict(), "seed": 3}), force=True)
    cmd_sweep(sweep)
    assert bnn_model.stat().st_mtime_ns != before[0]
    assert map_model.stat().st_mtime_ns == before[1]


def test_sweep_records_failures(tmp_path):
    rows = cmd_sweep(small_sweep(tmp_path, prior="priors/missing.json"))
    assert len(rows) == 4
    failures = rows_of(tmp_path / "results" / "results_failures.csv")
    assert len(failures) == 1 + 4
    assert all("bnn" in r[0] and "FileNotFoundError" in r[1] for r in failures[1:])


def test_cli(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({**TINY, "data_dir": str(tmp_path), "budget": 8}))
    assert main(["generate", "--config", str(cfg_path)]) == 0
    assert main(["generate", "--config", str(cfg_path)]) == 2
    assert "overwrite" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert main(["evaluate", "--config", str(cfg_path), "--posterior-grid", "0"]) == 0
    assert "coverage_auc" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "bnn"}))
    assert main(["train", "--config", str(bad)]) == 2
