"""Gaussian-process functional prior centred on the simulator prior, and weight-prior tuning.

The GP lives on posterior-density functions f(theta, x). Its mean is the
(constant) prior density C of the target parameters and its kernel is the
product of square-rooted RBF kernels over theta and over x, each with
per-feature lengthscales and amplitude sigma = C / 2.

``tune_prior`` fits a diagonal-Gaussian weight prior so that the densities
produced by the estimator under that prior match the GP at random
measurement sets. The entropy part of the functional KL is handled with a
spectral Stein gradient estimate of the score of the function samples.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, LinAlgError

from . import numcore as nc
from .bnn import STD_FLOOR, WeightDistribution, raw_to_std, std_to_raw
from .estimators import PosteriorEstimator
from .simulators import Simulator, make_rng

log = logging.getLogger(__name__)

LENGTHSCALE_FLOOR = 1e-3
MAX_PAIRS = 10_000


class GpError(RuntimeError):
    pass


class TuningDiverged(RuntimeError):
    pass


def lengthscales_from_measurements(samples: np.ndarray, quantile: float = 0.1,
                                   max_pairs: int = MAX_PAIRS, seed: int = 0) -> np.ndarray:
    """Per-feature l_i with 2 l_i^2 equal to the ``quantile`` of squared pairwise differences.

    Pairs are subsampled to ``max_pairs``. A constant feature gets l_i = 1;
    otherwise l_i is floored at 1e-3 (a zero quantile happens for discrete
    features).
    """
    z = np.asarray(samples, float)
    n, d = z.shape
    if n < 2:
        raise ValueError("need at least two samples")
    a, b = np.triu_indices(n, k=1)
    if len(a) > max_pairs:
        pick = np.random.default_rng(seed).choice(len(a), max_pairs, replace=False)
        a, b = a[pick], b[pick]
    sq = (z[a] - z[b]) ** 2
    out = np.empty(d)
    for i in range(d):
        if np.all(z[:, i] == z[0, i]):
            warnings.warn(f"feature {i} is constant; using lengthscale 1", RuntimeWarning, stacklevel=2)
            out[i] = 1.0
            continue
        q = np.quantile(sq[:, i], quantile)
        out[i] = max(np.sqrt(q / 2.0), LENGTHSCALE_FLOOR)
    return out


@dataclass(frozen=True)
class MeasurementSet:
    thetas: np.ndarray
    xs: np.ndarray

    def __len__(self):
        return len(self.thetas)


def sample_measurement_set(sim: Simulator, m: int, rng: np.random.Generator) -> MeasurementSet:
    """Target parameters uniform in the prior box, observations uniform in the support bounds."""
    thetas = rng.uniform(sim.target_low, sim.target_high, size=(m, sim.target_dim))
    xs = rng.uniform(sim.obs_low, sim.obs_high, size=(m, sim.x_dim))
    return MeasurementSet(thetas, xs)


def _half_rbf(a: np.ndarray, b: np.ndarray, ls: np.ndarray, sigma: float) -> np.ndarray:
    """sqrt of sigma^2 exp(-(1/N) sum_i (a_i - b_i)^2 / (2 l_i^2)) for all row pairs."""
    diff = (a[:, None, :] - b[None, :, :]) / ls
    return sigma * np.exp(-0.25 * np.mean(diff * diff, axis=-1))


@dataclass(frozen=True)
class GpFunctionalPrior:
    mean_value: float
    sigma: float
    lengthscales_theta: np.ndarray
    lengthscales_x: np.ndarray
    jitter: float = 1e-6

    @classmethod
    def for_simulator(cls, sim: Simulator, n_reference: int = 1000, seed: int = 0) -> "GpFunctionalPrior":
        """Mean C = prior density, sigma = C/2, lengthscales from a reference measurement set."""
        c = sim.target_density
        mset = sample_measurement_set(sim, n_reference, make_rng(seed))
        return cls(c, c / 2.0, lengthscales_from_measurements(mset.thetas),
                   lengthscales_from_measurements(mset.xs))

    def kernel(self, theta1, x1, theta2, x2) -> float:
        t1, t2 = np.atleast_2d(theta1), np.atleast_2d(theta2)
        y1, y2 = np.atleast_2d(x1), np.atleast_2d(x2)
        return float(self.gram_between(t1, y1, t2, y2)[0, 0])

    def gram_between(self, t1, x1, t2, x2) -> np.ndarray:
        return (_half_rbf(t1, t2, self.lengthscales_theta, self.sigma)
                * _half_rbf(x1, x2, self.lengthscales_x, self.sigma))

    def gram(self, mset: MeasurementSet) -> np.ndarray:
        k = self.gram_between(mset.thetas, mset.xs, mset.thetas, mset.xs)
        return 0.5 * (k + k.T)

    def cholesky(self, mset: MeasurementSet) -> np.ndarray:
        """Lower Cholesky factor of Gram + jitter sigma^2 I, escalating jitter 1e-6 -> 1e-4."""
        k = self.gram(mset)
        eye = np.eye(len(k))
        for rel in (self.jitter, 1e-5, 1e-4):
            try:
                return cholesky(k + rel * self.sigma ** 2 * eye, lower=True)
            except LinAlgError:
                continue
        raise GpError("Gram matrix is not positive definite even with jitter 1e-4 sigma^2")

    def mean_vector(self, m: int) -> np.ndarray:
        return np.full(m, self.mean_value)

    def to_json(self) -> dict:
        return {"mean_value": self.mean_value, "sigma": self.sigma,
                "lengthscales_theta": self.lengthscales_theta.tolist(),
                "lengthscales_x": self.lengthscales_x.tolist(), "jitter": self.jitter}

    @classmethod
    def from_json(cls, d) -> "GpFunctionalPrior":
        return cls(d["mean_value"], d["sigma"], np.asarray(d["lengthscales_theta"], float),
                   np.asarray(d["lengthscales_x"], float), d.get("jitter", 1e-6))


def gp_log_density(gp: GpFunctionalPrior, f: np.ndarray, mset: MeasurementSet) -> np.ndarray:
    """log N(f; C 1, Gram + jitter I); ``f`` is (M,) or (n, M)."""
    f = np.asarray(f, float)
    if f.shape[-1] != len(mset):
        raise ValueError(f"f has {f.shape[-1]} entries, measurement set has {len(mset)}")
    return nc.PRIMITIVES["mvn_logpdf"].fwd(f, gp.mean_vector(len(mset)), gp.cholesky(mset))


# ---------------------------------------------------------------------------
# spectral Stein gradient estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SsgeConfig:
    n_eigen: int = 6
    bandwidth: float | str = "median"
    rank_tol: float = 1e-8


def ssge_scores(samples: np.ndarray, cfg: SsgeConfig = SsgeConfig(),
                points: np.ndarray | None = None) -> np.ndarray:
    """Estimate grad log q at each of the N samples (N, D) drawn from q.

    Nystrom eigenfunctions psi_j of an RBF kernel on the samples, with
    coefficients beta_j = -mean_n grad psi_j(f_n); the score is
    sum_j beta_j psi_j. ``points`` evaluates the estimate elsewhere.
    """
    x = np.asarray(samples, float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 2:
        raise ValueError("SSGE needs at least two samples")
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    if cfg.bandwidth == "median":
        off = sq[np.triu_indices(n, k=1)]
        h2 = float(np.median(off))
        if h2 <= 0:
            h2 = 1.0
    else:
        h2 = float(cfg.bandwidth) ** 2
    k = np.exp(-sq / (2.0 * h2))
    lam, u = np.linalg.eigh(k)
    lam, u = lam[::-1], u[:, ::-1]
    j = min(cfg.n_eigen, n)
    rank = int(np.sum(lam > cfg.rank_tol * lam[0]))
    j = max(1, min(j, rank))
    lam, u = lam[:j], u[:, :j]
    psi = np.sqrt(n) * (k @ u) / lam
    # sum_n grad_x k(x_n, x_m) = -(sum_n k_nm x_n - x_m sum_n k_nm) / h2
    gk = -(k @ x - k.sum(axis=1, keepdims=True) * x) / h2
    beta = -(np.sqrt(n) / lam)[:, None] * (u.T @ gk) / n
    if points is not None:
        p = np.asarray(points, float).reshape(-1, x.shape[1])
        kp = np.exp(-np.sum((p[:, None, :] - x[None, :, :]) ** 2, axis=-1) / (2.0 * h2))
        psi = np.sqrt(n) * (kp @ u) / lam
    return psi @ beta


# ---------------------------------------------------------------------------
# prior tuning
# ---------------------------------------------------------------------------


@dataclass
class TuningConfig:
    iters: int = 4000
    lr: float = 1e-2
    n_func: int = 32
    n_measure: int = 64
    init_std: float = 0.1
    # J is capped at n_func - 1; with J = 6 the entropy term is underestimated and the prior collapses
    n_eigen: int = 31
    divergence_factor: float = 10.0


@dataclass
class TuningResult:
    prior: WeightDistribution
    cross_term: list[float] = field(default_factory=list)


def build_function_graph(est: PosteriorEstimator):
    """Graph of f = p(theta_m | x_m, w_n) for pathwise weights w = mu + std * eps.

    Returns (graph, f node) where the graph output is the negative mean GP
    log-density of the function samples (the cross-term of the KL).
    """
    n = est.n_weights
    mu = nc.leaf("mu", shape=(n,))
    std = nc.softplus(nc.leaf("raw", shape=(n,))) + STD_FLOOR
    eps = nc.leaf("eps", differentiable=False, shape=(None, n))
    w = nc.reparam(mu, std, eps)
    theta = nc.leaf("theta", differentiable=False, shape=(None, est.theta_dim))
    x = nc.leaf("x", differentiable=False, shape=(None, est.x_dim))
    lp, _ = est.build_log_prob(w, theta, x)
    if est.kind == "NRE":
        # measurement parameters lie inside the box, where the log prior is constant
        lp = lp - float(np.sum(np.log(est.prior_high - est.prior_low)))
    f = nc.exp(lp)
    gp_mean = nc.leaf("gp_mean", differentiable=False)
    chol = nc.leaf("chol", differentiable=False)
    cross = -nc.mean(nc.mvn_logpdf(f, gp_mean, chol))
    return nc.Graph(cross), f


def tune_prior(est: PosteriorEstimator, sim: Simulator, gp: GpFunctionalPrior,
               cfg: TuningConfig = TuningConfig(), seed: int = 0,
               init: WeightDistribution | None = None) -> TuningResult:
    """Minimize KL[p_BNN(f | phi, M) || p_GP(f | M)] over phi with a fresh measurement set each step."""
    rng = make_rng(seed)
    n = est.n_weights
    start = init or WeightDistribution.isotropic(n, cfg.init_std)
    params = {"mu": start.means.copy(), "raw": std_to_raw(start.stds)}
    graph, f_node = build_function_graph(est)
    opt = nc.Adam(params, lr=cfg.lr)
    ssge_cfg = SsgeConfig(n_eigen=min(cfg.n_eigen, cfg.n_func - 1))
    result = TuningResult(start)
    ema, best = None, np.inf
    for it in range(cfg.iters):
        mset = sample_measurement_set(sim, cfg.n_measure, rng)
        inputs = {
            **params,
            "eps": rng.standard_normal((cfg.n_func, n)),
            "theta": mset.thetas,
            "x": mset.xs,
            "gp_mean": gp.mean_vector(cfg.n_measure),
            "chol": gp.cholesky(mset),
        }
        ws = graph.workspace()
        cross = float(ws.forward(inputs))
        if not np.isfinite(cross):
            raise TuningDiverged(f"non-finite cross-term at iteration {it}")
        f = ws[f_node]
        scores = ssge_scores(f, ssge_cfg)
        grads = ws.backward(seeds={f_node: scores / cfg.n_func})
        opt.step(params, grads)
        result.cross_term.append(cross)
        ema = cross if ema is None else 0.98 * ema + 0.02 * cross
        best = min(best, ema)
        if it > 100 and ema - best > cfg.divergence_factor * max(abs(best), 1.0):
            raise TuningDiverged(f"cross-term moving average {ema:.3g} vs best {best:.3g} at iteration {it}")
    result.prior = WeightDistribution(params["mu"].copy(), raw_to_std(params["raw"]))
    return result


def save_prior(path: str | Path, est: PosteriorEstimator, gp: GpFunctionalPrior, prior: WeightDistribution,
               cfg: TuningConfig, seed: int, **extra) -> None:
    doc = {"spec": est.spec_json(), "standardization": est.standardization_json(), "gp": gp.to_json(),
           **prior.to_json(), "tuning": asdict(cfg), "seed": seed, **extra}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_prior(path: str | Path):
    """Returns (prior, estimator, gp, document)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    est = PosteriorEstimator.from_json(doc["spec"], doc["standardization"])
    return WeightDistribution.from_json(doc), est, GpFunctionalPrior.from_json(doc["gp"]), doc
