import pytest

from bnn_sbi.functional_prior import load_prior
from bnn_sbi.runner import ExperimentConfig, cmd_tune_prior


@pytest.fixture(scope="session")
def artifact_root(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def tuned_priors(artifact_root):
    """Full-size tuned priors, built once per session and keyed by simulator."""
    cache = {}

    def get(simulator):
        if simulator not in cache:
            cfg = ExperimentConfig(simulator=simulator, method="prior", prior_path=f"priors/{simulator}.json",
                                   data_dir=str(artifact_root))
            _, curve = cmd_tune_prior(cfg)
            prior, est, gp, _ = load_prior(cfg.prior_file)
            cache[simulator] = {"config": cfg, "curve": curve, "prior": prior, "estimator": est, "gp": gp}
        return cache[simulator]

    return get


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Records one (passed, detail) entry per criterion for the terminal summary."""

    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
