import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnn_sbi import numcore as nc
from bnn_sbi.bnn import BmaPosterior, WeightDistribution
from bnn_sbi.estimators import make_estimator
from bnn_sbi.functional_prior import (
    GpError,
    GpFunctionalPrior,
    MeasurementSet,
    SsgeConfig,
    TuningConfig,
    build_function_graph,
    gp_log_density,
    lengthscales_from_measurements,
    load_prior,
    sample_measurement_set,
    save_prior,
    ssge_scores,
    tune_prior,
)
from bnn_sbi.simulators import get_simulator, make_rng


@pytest.fixture(scope="module")
def two_moons():
    return get_simulator("two_moons")


@pytest.fixture(scope="module")
def gp(two_moons):
    return GpFunctionalPrior.for_simulator(two_moons)


# ---------------------------------------------------------------------------
# lengthscales and kernel
# ---------------------------------------------------------------------------


def test_lengthscale_binary_feature_hits_floor():
    z = np.array([[0.0], [1.0]] * 20)
    assert lengthscales_from_measurements(z)[0] == pytest.approx(1e-3)


def test_lengthscale_uniform_feature_matches_triangular_quantile():
    # |U - U'| has cdf 1 - (1 - d)^2, so the 0.1 quantile of the square is (1 - sqrt(0.9))^2
    z = make_rng(0).uniform(size=(10_000, 1))
    expected = math.sqrt((1 - math.sqrt(0.9)) ** 2 / 2)
    assert lengthscales_from_measurements(z)[0] == pytest.approx(expected, rel=0.05)


def test_lengthscale_scales_with_data():
    z = make_rng(1).normal(size=(300, 3))
    np.testing.assert_allclose(lengthscales_from_measurements(10 * z), 10 * lengthscales_from_measurements(z),
                               rtol=1e-12)


def test_lengthscale_constant_feature_warns():
    z = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
    with pytest.warns(RuntimeWarning, match="constant"):
        ls = lengthscales_from_measurements(z)
    assert ls[0] == 1.0
    with pytest.raises(ValueError):
        lengthscales_from_measurements(z[:1])


def test_two_moons_gp_constants(gp):
    assert gp.mean_value == 0.25
    assert gp.sigma == 0.125


def test_kernel_diagonal_and_symmetry(gp):
    rng = make_rng(2)
    a, b = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
    xa, xb = rng.normal(size=2), rng.normal(size=2)
    assert gp.kernel(a, xa, a, xa) == pytest.approx(gp.sigma ** 2, rel=1e-15)
    assert gp.kernel(a, xa, b, xb) == gp.kernel(b, xb, a, xa)


def test_kernel_matches_formula(gp):
    t1, t2 = np.array([0.1, -0.4]), np.array([0.5, 0.2])
    x1, x2 = np.array([0.0, 0.3]), np.array([-0.2, 0.1])
    rbf_t = gp.sigma ** 2 * np.exp(-np.mean((t1 - t2) ** 2 / (2 * gp.lengthscales_theta ** 2)))
    rbf_x = gp.sigma ** 2 * np.exp(-np.mean((x1 - x2) ** 2 / (2 * gp.lengthscales_x ** 2)))
    assert gp.kernel(t1, x1, t2, x2) == pytest.approx(math.sqrt(rbf_t * rbf_x), rel=1e-12)


def test_gram_positive_semidefinite(gp, two_moons):
    k = gp.gram(sample_measurement_set(two_moons, 50, make_rng(3)))
    np.testing.assert_array_equal(k, k.T)
    assert np.linalg.eigvalsh(k).min() > -1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_property_jittered_gram_factorizes(m, seed):
    sim = get_simulator("two_moons")
    gp = GpFunctionalPrior.for_simulator(sim, n_reference=200)
    mset = sample_measurement_set(sim, m, make_rng(seed))
    chol = gp.cholesky(mset)
    np.testing.assert_allclose(chol @ chol.T, gp.gram(mset) + 1e-6 * gp.sigma ** 2 * np.eye(m),
                               atol=1e-8 * gp.sigma ** 2)


def test_measurement_set_bounds_and_seeds(two_moons):
    a = sample_measurement_set(two_moons, 64, make_rng(0))
    b = sample_measurement_set(two_moons, 64, make_rng(1))
    assert len(a) == 64
    assert np.all(two_moons.in_box(a.thetas))
    assert np.all((a.xs >= two_moons.obs_low) & (a.xs <= two_moons.obs_high))
    assert not np.array_equal(a.thetas, b.thetas)


# ---------------------------------------------------------------------------
# GP log density
# ---------------------------------------------------------------------------


def test_log_density_single_point_at_mean(gp):
    mset = MeasurementSet(np.zeros((1, 2)), np.zeros((1, 2)))
    var = gp.sigma ** 2 * (1 + 1e-6)
    assert gp_log_density(gp, np.array([gp.mean_value]), mset) == pytest.approx(-0.5 * math.log(2 * math.pi * var))


def test_log_density_decreases_away_from_mean(gp, two_moons):
    mset = sample_measurement_set(two_moons, 10, make_rng(4))
    d = make_rng(5).normal(size=10)
    vals = [gp_log_density(gp, gp.mean_vector(10) + s * d, mset) for s in (0.0, 0.01, 0.05, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_log_density_length_mismatch(gp, two_moons):
    with pytest.raises(ValueError):
        gp_log_density(gp, np.zeros(3), sample_measurement_set(two_moons, 4, make_rng(0)))


def test_long_lengthscale_rank_one_limit(two_moons):
    gp = GpFunctionalPrior(0.25, 0.125, np.full(2, 1e6), np.full(2, 1e6))
    m = 6
    mset = sample_measurement_set(two_moons, m, make_rng(6))
    np.testing.assert_allclose(gp.gram(mset), gp.sigma ** 2 * np.ones((m, m)), rtol=1e-10)
    base = gp_log_density(gp, gp.mean_vector(m), mset)
    jit = 1e-6 * gp.sigma ** 2
    for t in (0.01, 0.05):
        # moving along the all-ones direction only sees the rank-one variance M sigma^2 + jitter
        delta = gp_log_density(gp, gp.mean_vector(m) + t, mset) - base
        assert delta == pytest.approx(-0.5 * t ** 2 * m / (m * gp.sigma ** 2 + jit), rel=1e-4)


def test_cholesky_failure_raises(gp, two_moons, monkeypatch):
    mset = sample_measurement_set(two_moons, 3, make_rng(0))
    monkeypatch.setattr(GpFunctionalPrior, "gram", lambda self, ms: -np.eye(len(ms)))
    with pytest.raises(GpError):
        gp.cholesky(mset)


def test_gp_json_roundtrip(gp):
    back = GpFunctionalPrior.from_json(gp.to_json())
    np.testing.assert_array_equal(back.lengthscales_x, gp.lengthscales_x)
    assert back.sigma == gp.sigma


# ---------------------------------------------------------------------------
# SSGE
# ---------------------------------------------------------------------------


def test_ssge_shift_invariance():
    f = make_rng(1).standard_normal((200, 3))
    np.testing.assert_allclose(ssge_scores(f + 7.5), ssge_scores(f), atol=1e-8)


def test_ssge_full_rank_unbiased_on_average():
    pts = np.linspace(-1, 1, 5)
    est = np.mean([ssge_scores(make_rng(s).standard_normal(1000), SsgeConfig(n_eigen=1000), points=pts).ravel()
                   for s in range(50)], axis=0)
    np.testing.assert_allclose(est, -pts, atol=0.1)


def test_ssge_points_default_to_samples():
    f = make_rng(2).standard_normal((50, 2))
    np.testing.assert_allclose(ssge_scores(f, points=f), ssge_scores(f), rtol=1e-10)


def test_ssge_rank_deficient_and_small():
    f = np.repeat(make_rng(3).standard_normal((3, 2)), 4, axis=0)
    assert np.all(np.isfinite(ssge_scores(f, SsgeConfig(n_eigen=10))))
    with pytest.raises(ValueError):
        ssge_scores(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# prior tuning
# ---------------------------------------------------------------------------


def tuning_inputs(est, sim, gp, seed=0, n_func=4, m=5):
    rng = make_rng(seed)
    mset = sample_measurement_set(sim, m, rng)
    return {"mu": rng.normal(0, 0.2, est.n_weights), "raw": rng.normal(-2, 0.3, est.n_weights),
            "eps": rng.standard_normal((n_func, est.n_weights)), "theta": mset.thetas, "x": mset.xs,
            "gp_mean": gp.mean_vector(m), "chol": gp.cholesky(mset)}


@pytest.mark.parametrize("kind", ["npe-mdn", "nre"])
def test_tuning_cross_term_gradients(kind, two_moons, gp):
    est = make_estimator(kind, two_moons, hidden_layers=1, hidden_units=6)
    graph, _ = build_function_graph(est)
    rep = nc.check_gradients(graph, tuning_inputs(est, two_moons, gp), tol=1e-4)
    assert rep.passed, str(rep)


def test_tuning_entropy_vjp_matches_finite_differences(two_moons, gp):
    est = make_estimator("npe-mdn", two_moons, hidden_layers=1, hidden_units=6)
    graph, f = build_function_graph(est)
    inputs = tuning_inputs(est, two_moons, gp)
    s = make_rng(9).normal(size=(4, 5))
    surrogate = nc.Graph(graph.output + nc.sum(f * nc.const(s)))
    ws = graph.workspace()
    ws.forward(inputs)
    seeded = ws.backward(seeds={f: s})
    rep = nc.check_gradients(surrogate, inputs, tol=1e-4, vjp=lambda _: seeded)
    assert rep.passed, str(rep)


def test_tune_prior_deterministic_and_floored(two_moons, gp):
    est = make_estimator("npe-mdn", two_moons, hidden_layers=1, hidden_units=8)
    cfg = TuningConfig(iters=15, n_func=8, n_measure=16, lr=1e-2)
    a = tune_prior(est, two_moons, gp, cfg, seed=3)
    b = tune_prior(est, two_moons, gp, cfg, seed=3)
    np.testing.assert_array_equal(a.prior.means, b.prior.means)
    np.testing.assert_array_equal(a.prior.stds, b.prior.stds)
    assert a.cross_term == b.cross_term and len(a.cross_term) == 15
    assert np.all(a.prior.stds >= 1e-3)
    c = tune_prior(est, two_moons, gp, cfg, seed=4)
    assert not np.array_equal(a.prior.means, c.prior.means)


def test_prior_save_load_roundtrip(tmp_path, two_moons, gp):
    est = make_estimator("npe-mdn", two_moons, hidden_layers=1, hidden_units=4)
    prior = WeightDistribution(np.arange(est.n_weights, dtype=float), np.full(est.n_weights, 0.2))
    save_prior(tmp_path / "p.json", est, gp, prior, TuningConfig(), seed=5, note="x")
    back, est2, gp2, doc = load_prior(tmp_path / "p.json")
    np.testing.assert_array_equal(back.means, prior.means)
    assert est2.n_weights == est.n_weights and gp2.sigma == gp.sigma
    assert doc["seed"] == 5 and doc["tuning"]["iters"] == 4000 and doc["note"] == "x"


def test_tuned_prior_density_near_gp_mean(tuned_priors, two_moons):
    t = tuned_priors("two_moons")
    bma = BmaPosterior.from_distribution(t["estimator"], t["prior"], 100, seed=0)
    mset = sample_measurement_set(two_moons, 500, make_rng(11))
    mean = float(np.mean(np.exp(bma.log_prob(mset.thetas, mset.xs))))
    c = t["gp"].mean_value
    assert c / 2 <= mean <= 2 * c


def test_tuned_prior_beats_wide_normal(tuned_priors):
    from bnn_sbi.diagnostics import ProductGrid, expected_coverage
    from bnn_sbi.simulators import Dataset
    t = tuned_priors("two_moons")
    cfg = t["config"]
    sim = get_simulator("two_moons")
    test = Dataset.load(cfg.test_path)
    wide = BmaPosterior.from_distribution(t["estimator"], WeightDistribution.isotropic(t["estimator"].n_weights, 1.0),
                                          100, seed=0)
    auc = expected_coverage(wide, test.thetas[:300], test.xs[:300], grid=ProductGrid.for_simulator(sim, 100)).auc
    assert abs(auc) > abs(t["curve"].auc)
