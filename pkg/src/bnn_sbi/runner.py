"""Command-line pipeline: generate, tune-prior, train, evaluate, sweep.

Artifacts live under ``$SBI_DATA_DIR`` (default ``./artifacts``)::

    datasets/<sim>/train_s<seed>_n<budget>.csv   (+ .json metadata)
    datasets/<sim>/test_s<seed>_n<n_test>.csv
    models/<run>.json
    results/<run>_coverage.csv, <run>_posterior_grid_<i>.csv,
            <run>_uncertainty.csv, <run>_timing.json
    results/results.csv                          one row per evaluated run
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bnn import (
    BmaPosterior,
    load_distribution,
    member_seed,
    save_distribution,
    train_ensemble,
    train_vi,
)
from .diagnostics import (
    PriorPosterior,
    ProductGrid,
    decompose_uncertainty,
    expected_coverage,
    grid_density,
    nominal_log_prob,
)
from .estimators import PosteriorEstimator, load_weights, make_estimator, save_weights, train_map
from .functional_prior import (
    GpFunctionalPrior,
    TuningConfig,
    TuningDiverged,
    load_prior,
    save_prior,
    tune_prior,
)
from .simulators import FLOAT_FMT, Dataset, generate_dataset, get_simulator

log = logging.getLogger("bnn_sbi")

CODE_VERSION = f"bnn_sbi {__version__}"
METHODS = ("map", "ensemble", "bnn", "prior")
ESTIMATORS = ("npe-mdn", "nre")
# test rows come from a seed range no training seed may use
TEST_SEED_OFFSET = 1_000_000
RESULT_FIELDS = ("simulator", "estimator", "method", "temperature", "budget", "seed",
                 "nominal_log_prob", "coverage_auc")
KEY_FIELDS = RESULT_FIELDS[:6]


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


def _reject_unknown(d: dict, allowed, what: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown {what} field(s): {', '.join(extra)}")


@dataclass
class ExperimentConfig:
    simulator: str = "two_moons"
    estimator: str = "npe-mdn"
    method: str = "map"
    temperature: float = 1.0
    budget: int = 128
    seed: int = 0
    epochs: int = 500
    lr: float = 1e-3
    mc_samples: int = 100
    prior_path: str | None = None
    n_test: int = 500
    data_dir: str | None = None
    results_path: str | None = None
    # extras
    n_members: int = 5
    mc_train: int = 4
    hidden_layers: int = 3
    hidden_units: int = 64
    grid_resolution: int = 200
    n_decompose: int = 100
    tuning_iters: int = 4000
    tuning_lr: float = 1e-2
    tuning_n_func: int = 32
    tuning_n_measure: int = 64
    tuning_n_eigen: int = 31

    def __post_init__(self):
        get_simulator(self.simulator)
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.method == "bnn" and not self.prior_path:
            raise ConfigError("method=bnn requires prior_path")
        if self.budget < 1 or self.mc_samples < 1 or self.n_test < 1:
            raise ConfigError("budget, mc_samples and n_test must be >= 1")
        if not 0 <= self.seed < TEST_SEED_OFFSET:
            raise ConfigError(f"seed must lie in [0, {TEST_SEED_OFFSET})")
        if self.method == "bnn" and self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.method != "bnn":
            # keeps run names and hashes independent of an ignored field
            self.temperature = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # ---- paths --------------------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.data_dir or os.environ.get("SBI_DATA_DIR") or "artifacts")

    def _resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def run_name(self) -> str:
        t = f"_T{self.temperature:g}" if self.method == "bnn" else ""
        return f"{self.simulator}_{self.estimator}_{self.method}{t}_n{self.budget}_s{self.seed}"

    @property
    def train_path(self) -> Path:
        return self.root / "datasets" / self.simulator / f"train_s{self.seed}_n{self.budget}.csv"

    @property
    def test_path(self) -> Path:
        return self.root / "datasets" / self.simulator / f"test_s{self.seed}_n{self.n_test}.csv"

    @property
    def model_path(self) -> Path:
        return self.root / "models" / f"{self.run_name}.json"

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    @property
    def results_csv(self) -> Path:
        return self._resolve(self.results_path) if self.results_path else self.results_dir / "results.csv"

    @property
    def prior_file(self) -> Path:
        if not self.prior_path:
            raise ConfigError("prior_path is not set")
        return self._resolve(self.prior_path)


@dataclass
class ResultRow:
    simulator: str
    estimator: str
    method: str
    temperature: float
    budget: int
    seed: int
    nominal_log_prob: float
    coverage_auc: float
    wall_time_seconds: float = field(default=0.0, compare=False)

    def csv_values(self) -> list[str]:
        out = []
        for name in RESULT_FIELDS:
            v = getattr(self, name)
            out.append(FLOAT_FMT.format(v) if isinstance(v, float) else str(v))
        return out


# ---------------------------------------------------------------------------
# IO helpers
# ---------------------------------------------------------------------------


def _artifact_meta(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "code_version": CODE_VERSION}


def _check_writable(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


@contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_name(path.name + ".lock"), "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def _sort_key(row: list[str]):
    return (row[0], row[1], row[2], float(row[3]), int(row[4]), int(row[5]))


def upsert_result(path: Path, row: ResultRow) -> None:
    """Insert ``row`` into the results CSV, replacing a row with the same run key.

    Rows are kept sorted so the file does not depend on completion order.
    """
    with _locked(path):
        rows = []
        if path.exists():
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))[1:]
        new = row.csv_values()
        k = len(KEY_FIELDS)
        rows = [r for r in rows if r[:k] != new[:k]] + [new]
        _write_csv(path, RESULT_FIELDS, sorted(rows, key=_sort_key))


def read_results(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_or_generate_test(cfg: ExperimentConfig) -> Dataset:
    if cfg.test_path.exists():
        return Dataset.load(cfg.test_path)
    return generate_dataset(get_simulator(cfg.simulator), cfg.n_test, TEST_SEED_OFFSET + cfg.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> tuple[Path, Path]:
    """Training set of ``budget`` rows and a disjoint test set of ``n_test`` rows."""
    sim = get_simulator(cfg.simulator)
    outs = [cfg.train_path, cfg.test_path]
    _check_writable(outs, force)
    cfg.train_path.parent.mkdir(parents=True, exist_ok=True)
    generate_dataset(sim, cfg.budget, cfg.seed).save(cfg.train_path, **_artifact_meta(cfg))
    generate_dataset(sim, cfg.n_test, TEST_SEED_OFFSET + cfg.seed).save(cfg.test_path, **_artifact_meta(cfg))
    return cfg.train_path, cfg.test_path


def _make_estimator(cfg: ExperimentConfig) -> PosteriorEstimator:
    return make_estimator(cfg.estimator, get_simulator(cfg.simulator), cfg.hidden_layers, cfg.hidden_units)


def prior_coverage_path(prior_file: Path) -> Path:
    return prior_file.with_name(prior_file.stem + "_coverage.csv")


def cmd_tune_prior(cfg: ExperimentConfig, force: bool = False):
    """Tune the weight prior, save it, and write the coverage curve of its a-priori BMA."""
    sim = get_simulator(cfg.simulator)
    out = cfg.prior_file
    report = prior_coverage_path(out)
    _check_writable([out, report], force)
    est = _make_estimator(cfg)
    gp = GpFunctionalPrior.for_simulator(sim, seed=cfg.seed)
    tcfg = TuningConfig(iters=cfg.tuning_iters, lr=cfg.tuning_lr, n_func=cfg.tuning_n_func,
                        n_measure=cfg.tuning_n_measure, n_eigen=cfg.tuning_n_eigen)
    res = tune_prior(est, sim, gp, tcfg, seed=cfg.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior(out, est, gp, res.prior, tcfg, cfg.seed, **_artifact_meta(cfg))
    test = _load_or_generate_test(cfg)
    bma = BmaPosterior.from_distribution(est, res.prior, cfg.mc_samples, seed=member_seed(cfg.seed, 0))
    curve = expected_coverage(bma, test.target_thetas(sim), test.xs,
                              grid=ProductGrid.for_simulator(sim, cfg.grid_resolution))
    curve.to_csv(report)
    log.info("prior coverage auc %.4f", curve.auc)
    return res.prior, curve


def _check_dims(est: PosteriorEstimator, cfg: ExperimentConfig, what: str) -> None:
    sim = get_simulator(cfg.simulator)
    if (est.theta_dim, est.x_dim) != (sim.target_dim, sim.x_dim):
        raise ArtifactError(
            f"{what} has dims (theta {est.theta_dim}, x {est.x_dim}) but {cfg.simulator} needs "
            f"(theta {sim.target_dim}, x {sim.x_dim})")
    kind = {"npe-mdn": "MDN", "nre": "NRE"}[cfg.estimator]
    if est.kind != kind:
        raise ArtifactError(f"{what} is a {est.kind} estimator, config asks for {cfg.estimator}")


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Train the configured method and persist it with a config echo."""
    if cfg.method == "prior":
        raise ConfigError("method=prior has nothing to train")
    sim = get_simulator(cfg.simulator)
    _check_writable([cfg.model_path], force)
    if not cfg.train_path.exists():
        raise ArtifactError(f"missing training set {cfg.train_path}; run generate first")
    data = Dataset.load(cfg.train_path)
    if data.simulator != sim.name or data.thetas.shape[1] != sim.theta_dim or data.xs.shape[1] != sim.x_dim:
        raise ArtifactError(f"dataset {cfg.train_path} does not match simulator {sim.name}")
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {**_artifact_meta(cfg), "method": cfg.method}
    if cfg.method == "bnn":
        prior, est, _, _ = load_prior(cfg.prior_file)
        _check_dims(est, cfg, f"prior {cfg.prior_file}")
        dist = train_vi(est, data, prior, cfg.temperature, cfg.epochs, cfg.lr, cfg.mc_train, cfg.seed, sim)
        save_distribution(cfg.model_path, dist, est, temperature=cfg.temperature, **meta)
    else:
        est = _make_estimator(cfg)
        if cfg.method == "map":
            w = train_map(est, data, cfg.epochs, cfg.lr, cfg.seed, sim)
        else:
            w = train_ensemble(est, data, cfg.n_members, cfg.epochs, cfg.lr, cfg.seed, sim).weights
        save_weights(cfg.model_path, est, w, **meta)
    return cfg.model_path


def load_model(cfg: ExperimentConfig):
    """The evaluable posterior for ``cfg`` (a BmaPosterior, or the prior pseudo-model)."""
    sim = get_simulator(cfg.simulator)
    if cfg.method == "prior":
        return PriorPosterior(sim)
    if not cfg.model_path.exists():
        raise ArtifactError(f"missing model {cfg.model_path}; run train first")
    doc = json.loads(cfg.model_path.read_text(encoding="utf-8"))
    if doc.get("method") != cfg.method:
        raise ArtifactError(f"{cfg.model_path} holds method {doc.get('method')!r}, config asks for {cfg.method!r}")
    if cfg.method == "bnn":
        dist, est, _ = load_distribution(cfg.model_path)
        _check_dims(est, cfg, str(cfg.model_path))
        return BmaPosterior.from_distribution(est, dist, cfg.mc_samples, seed=member_seed(cfg.seed, 1))
    est, w, _ = load_weights(cfg.model_path)
    _check_dims(est, cfg, str(cfg.model_path))
    return BmaPosterior(est, w)


def _grid_rows(grid: ProductGrid, dens: np.ndarray):
    for p, v in zip(grid.points, dens.reshape(-1)):
        yield [FLOAT_FMT.format(c) for c in p] + [FLOAT_FMT.format(v)]


def cmd_evaluate(cfg: ExperimentConfig, posterior_grid: int | None = None,
                 decompose: bool = False) -> ResultRow:
    """Coverage curve and nominal log density on the test set; upserts the results CSV."""
    start = time.perf_counter()
    sim = get_simulator(cfg.simulator)
    model = load_model(cfg)
    if not cfg.test_path.exists():
        raise ArtifactError(f"missing test set {cfg.test_path}; run generate first")
    test = Dataset.load(cfg.test_path)
    thetas, xs = test.target_thetas(sim), test.xs
    grid = ProductGrid.for_simulator(sim, cfg.grid_resolution)
    curve = expected_coverage(model, thetas, xs, grid=grid, seed=cfg.seed)
    nlp = nominal_log_prob(model, thetas, xs)
    if nlp.n_neg_inf:
        log.warning("%d of %d test pairs have zero density", nlp.n_neg_inf, nlp.n)
    out = cfg.results_dir
    out.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out / f"{cfg.run_name}_coverage.csv")
    if posterior_grid is not None:
        if not 0 <= posterior_grid < len(xs):
            raise ConfigError(f"--posterior-grid index {posterior_grid} outside test set of {len(xs)}")
        dens = grid_density(model, xs[posterior_grid], grid)
        dens = dens / (dens.sum() * grid.cell_volume)
        header = [f"theta_{i}" for i in sim.target_index] + ["density"]
        _write_csv(out / f"{cfg.run_name}_posterior_grid_{posterior_grid}.csv", header, _grid_rows(grid, dens))
    if decompose:
        if not isinstance(model, BmaPosterior):
            raise ConfigError("--decompose needs a trained model")
        rep = decompose_uncertainty(model, xs[:cfg.n_decompose], grid)
        _write_csv(out / f"{cfg.run_name}_uncertainty.csv",
                   ["predictive_entropy", "aleatoric", "epistemic"],
                   [[FLOAT_FMT.format(v) for v in (rep.predictive_entropy, rep.aleatoric, rep.epistemic)]])
    row = ResultRow(cfg.simulator, cfg.estimator, cfg.method, float(cfg.temperature), cfg.budget, cfg.seed,
                    float(nlp.value), float(curve.auc), time.perf_counter() - start)
    upsert_result(cfg.results_csv, row)
    # wall time varies between runs, so it stays out of the CSVs
    (out / f"{cfg.run_name}_timing.json").write_text(
        json.dumps({"wall_time_seconds": row.wall_time_seconds, **_artifact_meta(cfg)}, indent=2) + "\n",
        encoding="utf-8")
    return row


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_FIELDS = {"base", "budgets", "methods", "seeds"}
METHOD_FIELDS = {"method", "temperature", "estimator", "simulator"}


@dataclass
class SweepConfig:
    base: dict
    budgets: list[int] = field(default_factory=lambda: [32, 128, 512, 1024])
    methods: list[dict] = field(default_factory=lambda: [
        {"method": "map"}, {"method": "ensemble"},
        {"method": "bnn", "temperature": 1.0}, {"method": "bnn", "temperature": 0.01}])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        _reject_unknown(d, SWEEP_FIELDS, "sweep")
        if "base" not in d:
            raise ConfigError("sweep config needs a 'base' experiment config")
        for m in d.get("methods", []):
            _reject_unknown(m, METHOD_FIELDS, "sweep method")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SweepConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for m in self.methods:
            for b in self.budgets:
                for s in self.seeds:
                    out.append(ExperimentConfig.from_dict({**self.base, **m, "budget": b, "seed": s}))
        return out


def _done_path(cfg: ExperimentConfig) -> Path:
    return cfg.root / "sweep_state" / f"{cfg.config_hash()}.json"


def _prior_digest(cfg: ExperimentConfig) -> str | None:
    if cfg.method != "bnn" or not cfg.prior_file.exists():
        return None
    return hashlib.sha256(cfg.prior_file.read_bytes()).hexdigest()


def run_cell(cfg: ExperimentConfig, force: bool = False) -> ResultRow:
    """generate → train → evaluate for one sweep cell; skipped when already completed.

    A completed bnn cell is redone when its prior file has changed since.
    """
    done = _done_path(cfg)
    digest = _prior_digest(cfg)
    if done.exists() and not force:
        state = json.loads(done.read_text(encoding="utf-8"))
        if state.get("prior_digest") == digest:
            return ResultRow(**state["result"])
    if force or not (cfg.train_path.exists() and cfg.test_path.exists()):
        cmd_generate(cfg, force=True)
    if cfg.method != "prior":
        cmd_train(cfg, force=True)
    row = cmd_evaluate(cfg, decompose=cfg.method in ("ensemble", "bnn"))
    done.parent.mkdir(parents=True, exist_ok=True)
    done.write_text(json.dumps({"config": cfg.to_dict(), "prior_digest": digest, "result": asdict(row)},
                               indent=2) + "\n",
                    encoding="utf-8")
    return row


def _run_cell_safe(args):
    cfg, force = args
    try:
        return cfg, run_cell(cfg, force), None
    except Exception as e:  # recorded, the sweep goes on
        log.exception("cell %s failed", cfg.run_name)
        return cfg, None, f"{type(e).__name__}: {e}"


def median_rows(rows: list[ResultRow]) -> list[list[str]]:
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.simulator, r.estimator, r.method, r.temperature, r.budget), []).append(r)
    out = []
    for key in sorted(groups):
        g = groups[key]
        out.append([key[0], key[1], key[2], FLOAT_FMT.format(key[3]), str(key[4]), str(len(g)),
                    FLOAT_FMT.format(float(np.median([r.nominal_log_prob for r in g]))),
                    FLOAT_FMT.format(float(np.median([r.coverage_auc for r in g])))])
    return out


MEDIAN_FIELDS = ("simulator", "estimator", "method", "temperature", "budget", "n_seeds",
                 "nominal_log_prob", "coverage_auc")


def cmd_sweep(sweep: SweepConfig, jobs: int = 1, force: bool = False) -> list[ResultRow]:
    """Run every (method, budget, seed) cell; ``<results>_medians.csv`` and ``<results>_failures.csv`` go beside the results CSV."""
    cells = sweep.cells()
    if not cells:
        raise ConfigError("sweep has no cells")
    work = [(c, force) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_run_cell_safe, work))
    else:
        outcomes = [_run_cell_safe(w) for w in work]
    rows = [r for _, r, err in outcomes if err is None]
    failures = [[c.run_name, err] for c, _, err in outcomes if err is not None]
    res = cells[0].results_csv
    _write_csv(res.with_name(res.stem + "_medians.csv"), MEDIAN_FIELDS, median_rows(rows))
    _write_csv(res.with_name(res.stem + "_failures.csv"), ("run", "error"), failures)
    return rows


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbi", description="Bayesian-neural-network simulation-based inference")
    p.add_argument("command", choices=["generate", "tune-prior", "train", "evaluate", "sweep"])
    p.add_argument("--config", required=True, help="JSON experiment (or sweep) config")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p.add_argument("--posterior-grid", type=int, default=None, metavar="I",
                   help="dump the normalized density grid for test observation I")
    p.add_argument("--decompose", action="store_true", help="write the entropy decomposition")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sweep":
            rows = cmd_sweep(SweepConfig.load(args.config), args.jobs, args.force)
            print(f"{len(rows)} cells completed")
            return 0
        cfg = ExperimentConfig.load(args.config)
        if args.command == "generate":
            for p in cmd_generate(cfg, args.force):
                print(p)
        elif args.command == "tune-prior":
            _, curve = cmd_tune_prior(cfg, args.force)
            print(f"prior coverage auc {curve.auc:.4f}")
        elif args.command == "train":
            print(cmd_train(cfg, args.force))
        else:
            row = cmd_evaluate(cfg, args.posterior_grid, args.decompose)
            print(f"nominal_log_prob {row.nominal_log_prob:.4f} coverage_auc {row.coverage_auc:.4f}")
    except (ConfigError, ArtifactError, TuningDiverged, FileNotFoundError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
