"""Mean-field variational inference over estimator weights, Bayesian model averages and ensembles."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .estimators import (
    EstimatorError,
    PosteriorEstimator,
    batch_inputs,
    default_batch_size,
    iterate_batches,
    train_map,
    training_arrays,
)
from .simulators import Dataset, Simulator, make_rng

log = logging.getLogger(__name__)

STD_FLOOR = 1e-3


def std_to_raw(std: np.ndarray) -> np.ndarray:
    """Inverse of ``softplus(raw) + STD_FLOOR``; stds at the floor map to a very negative raw value."""
    excess = np.maximum(np.asarray(std, float) - STD_FLOOR, 1e-13)
    return np.where(excess > 30, excess, np.log(np.expm1(np.minimum(excess, 30))))


def raw_to_std(raw: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, raw) + STD_FLOOR


@dataclass(frozen=True)
class WeightDistribution:
    """Diagonal Gaussian over flattened weights. Stds below 0.001 are clamped up."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, float)
        stds = np.asarray(self.stds, float)
        if means.shape != stds.shape or means.ndim != 1:
            raise ValueError("means and stds must be 1-d arrays of equal length")
        if np.any(~(stds > 0)):
            raise ValueError("stds must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", np.maximum(stds, STD_FLOOR))

    def __len__(self):
        return len(self.means)

    @classmethod
    def isotropic(cls, n: int, std: float, mean: float = 0.0) -> "WeightDistribution":
        return cls(np.full(n, float(mean)), np.full(n, float(std)))

    @classmethod
    def from_raw(cls, means, raw) -> "WeightDistribution":
        return cls(np.array(means, float), raw_to_std(raw))

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "WeightDistribution":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float))


def sample_weights(dist: WeightDistribution, n: int, rng: np.random.Generator):
    """``n`` reparameterized draws; returns (weights, eps), both (n, n_weights)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = rng.standard_normal((n, len(dist)))
    return dist.means + dist.stds * eps, eps


def kl_diag_gaussians(q: WeightDistribution, p: WeightDistribution) -> float:
    """KL[q || p] for diagonal Gaussians."""
    if len(q) != len(p):
        raise ValueError("distributions have different lengths")
    if np.any(q.stds <= 0) or np.any(p.stds <= 0):
        raise ValueError("stds must be positive")
    r = q.stds / p.stds
    return float(np.sum(-np.log(r) + 0.5 * (r * r + ((q.means - p.means) / p.stds) ** 2) - 0.5))


def kl_node(mu: nc.Node, std: nc.Node, prior: WeightDistribution) -> nc.Node:
    """Graph form of ``kl_diag_gaussians`` with the prior held fixed.

    Written through r = std / prior_std so the std gradient r - 1/r is
    exactly zero when q sits on the prior.
    """
    r = std / prior.stds
    z = (mu - prior.means) / prior.stds
    return nc.sum(0.5 * (nc.square(r) + nc.square(z)) - nc.log(r)) - 0.5 * len(prior)


class ObjectiveError(RuntimeError):
    pass


def build_vi_graph(est: PosteriorEstimator, prior: WeightDistribution, fixed_std: bool = False):
    """Negative tempered ELBO as a graph.

    Leaves: ``mu``, ``raw`` (differentiable), ``eps`` (S, n_weights), the
    data batch, ``scale`` (likelihood weight, N/B for an unbiased full-data
    sum) and ``temperature``. Returns (graph, likelihood node, kl node).
    """
    n = est.n_weights
    mu = nc.leaf("mu", shape=(n,))
    if fixed_std:
        std = nc.leaf("std", differentiable=False, shape=(n,))
    else:
        std = nc.softplus(nc.leaf("raw", shape=(n,))) + STD_FLOOR
    eps = nc.leaf("eps", differentiable=False, shape=(None, n))
    w = nc.reparam(mu, std, eps)
    lik = nc.mean(est.build_data_term(w)) * nc.leaf("scale", differentiable=False, shape=())
    kl = kl_node(mu, std, prior)
    loss = nc.leaf("temperature", differentiable=False, shape=()) * kl - lik
    return nc.Graph(loss), lik, kl


def train_vi(est: PosteriorEstimator, dataset: Dataset, prior: WeightDistribution,
             temperature: float = 1.0, epochs: int = 500, lr: float = 1e-3, mc_train: int = 4,
             seed: int = 0, sim: Simulator | None = None, batch_size: int | None = None,
             data_weight: float = 1.0, fixed_std: bool = False) -> WeightDistribution:
    """Maximize E_q[sum_i log p(theta_i|x_i,w)] - T KL[q || prior] over q = (means, raw stds).

    q starts at the prior. ``data_weight`` rescales the likelihood term (0
    leaves only the prior term). With ``fixed_std`` the stds stay at the
    prior's and only the means move.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if len(prior) != est.n_weights:
        raise EstimatorError(f"prior has {len(prior)} weights, estimator needs {est.n_weights}")
    thetas, xs = training_arrays(est, dataset, sim)
    n = len(thetas)
    bs = batch_size or default_batch_size(n)
    rng = make_rng(seed)
    if not fixed_std:
        # the prior as the raw parameterization represents it, so q starts exactly on it
        prior = WeightDistribution(prior.means, raw_to_std(std_to_raw(prior.stds)))
    graph, lik_node, kl_node_ = build_vi_graph(est, prior, fixed_std)
    params = {"mu": prior.means.copy()}
    if fixed_std:
        consts = {"std": prior.stds.copy()}
    else:
        params["raw"] = std_to_raw(prior.stds)
        consts = {}
    opt = nc.Adam(params, lr=lr)
    T = np.array(float(temperature))
    for epoch in range(epochs):
        for idx in iterate_batches(n, bs, rng):
            inputs = batch_inputs(est, thetas, xs, idx, rng)
            inputs.update(params, **consts)
            inputs["eps"] = rng.standard_normal((mc_train, est.n_weights))
            inputs["scale"] = np.array(data_weight * n / len(idx))
            inputs["temperature"] = T
            ws = graph.workspace()
            loss = ws.forward(inputs)
            if not np.isfinite(loss):
                raise ObjectiveError(
                    f"non-finite VI objective at epoch {epoch}: likelihood {ws[lik_node]}, KL {ws[kl_node_]}")
            opt.step(params, ws.backward())
    if fixed_std:
        return WeightDistribution(params["mu"], prior.stds.copy())
    return WeightDistribution.from_raw(params["mu"], params["raw"])


# ---------------------------------------------------------------------------
# Bayesian model averages
# ---------------------------------------------------------------------------


@dataclass
class BmaPosterior:
    """Equal-weight average of the densities of ``weights`` (M, n_weights)."""

    estimator: PosteriorEstimator
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, float))
        if len(self.weights) < 1:
            raise ValueError("need at least one member")

    @property
    def n_members(self) -> int:
        return len(self.weights)

    def member_log_prob(self, theta, x) -> np.ndarray:
        """(M, B) member log densities."""
        return np.atleast_2d(self.estimator.log_posterior(theta, x, self.weights))

    def log_prob(self, theta, x) -> np.ndarray:
        lp = self.member_log_prob(theta, x)
        m = np.max(lp, axis=0)
        m = np.where(np.isfinite(m), m, 0.0)
        return np.log(np.mean(np.exp(lp - m), axis=0)) + m

    def grid_member_densities(self, x: np.ndarray, axes: list[np.ndarray]) -> np.ndarray:
        """(M, G1[, G2]) member densities on the product grid spanned by ``axes``."""
        est = self.estimator
        x = np.asarray(x, float)
        if est.kind == "MDN" and len(axes) <= 2:
            logw, mean, std = est.mixture(x[None], self.weights)
            w = np.exp(logw[:, 0])
            mean, std = mean[:, 0], std[:, 0]
            fac = []
            for i, a in enumerate(axes):
                z = (a[None, None, :] - mean[..., i, None]) / std[..., i, None]
                fac.append(np.exp(-0.5 * z * z) / (std[..., i, None] * np.sqrt(2.0 * np.pi)))
            if len(axes) == 1:
                return np.einsum("mk,mki->mi", w, fac[0])
            return np.matmul(np.swapaxes(w[:, :, None] * fac[0], 1, 2), fac[1])
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        xs = np.broadcast_to(x, (len(pts), len(x)))
        out = np.empty((self.n_members, len(pts)))
        for m in range(self.n_members):
            out[m] = np.exp(est.log_posterior(pts, xs, self.weights[m]))
        return out.reshape((self.n_members,) + mesh[0].shape)

    def sample(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draws from the BMA restricted to the prior box (MDN only)."""
        est = self.estimator
        if est.kind != "MDN":
            raise EstimatorError("sampling is only available for MDN estimators")
        logw, mean, std = est.mixture(np.asarray(x, float)[None], self.weights)
        w = np.exp(logw[:, 0]).reshape(-1)
        w = w / w.sum()
        mean = mean[:, 0].reshape(-1, est.theta_dim)
        std = std[:, 0].reshape(-1, est.theta_dim)
        out = np.empty((0, est.theta_dim))
        for _ in range(1000):
            c = rng.choice(len(w), size=4 * n, p=w)
            s = mean[c] + std[c] * rng.standard_normal((4 * n, est.theta_dim))
            s = s[np.all((s >= est.prior_low) & (s <= est.prior_high), axis=1)]
            out = np.vstack([out, s])
            if len(out) >= n:
                return out[:n]
        raise EstimatorError("rejection sampling accepted too few draws inside the prior box")

    @classmethod
    def from_distribution(cls, est: PosteriorEstimator, dist: WeightDistribution, n: int = 100,
                          seed: int = 0) -> "BmaPosterior":
        w, _ = sample_weights(dist, n, make_rng(seed))
        return cls(est, w)


def bma_log_density(bma: BmaPosterior, theta, x) -> np.ndarray:
    """log (1/M) sum_i p(theta | x, w_i)."""
    return bma.log_prob(theta, x)


def member_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def train_ensemble(est: PosteriorEstimator, dataset: Dataset, n_members: int = 5, epochs: int = 500,
                   lr: float = 1e-3, seed: int = 0, sim: Simulator | None = None) -> BmaPosterior:
    """Independent MAP trainings from distinct seeds, averaged."""
    if n_members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    members = [train_map(est, dataset, epochs, lr, member_seed(seed, i), sim=sim) for i in range(n_members)]
    return BmaPosterior(est, np.stack(members))


def save_distribution(path: str | Path, dist: WeightDistribution, est: PosteriorEstimator, **extra) -> None:
    doc = {**dist.to_json(), "spec": est.spec_json(), "standardization": est.standardization_json(), **extra}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_distribution(path: str | Path) -> tuple[WeightDistribution, PosteriorEstimator, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    est = PosteriorEstimator.from_json(doc["spec"], doc["standardization"])
    return WeightDistribution.from_json(doc), est, doc
