"""Conditional posterior surrogates as functions of a flat weight vector.

Two heads share one MLP body:

* ``MDN`` models p(theta | x, w) directly as a mixture of diagonal Gaussians
  (posterior estimation).
* ``NRE`` is a classifier whose raw score is log r(theta, x); the posterior is
  r(theta, x) p(theta) (ratio estimation).

Weights are always handled in batches of shape ``(S, n_weights)`` so the same
graph evaluates one network, an ensemble, or S variational samples.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .simulators import Dataset, Simulator, make_rng

log = logging.getLogger(__name__)

MEAN_BOUND = 1.5 * math.sqrt(3.0)  # 1.5x the prior box half-width in standardized units


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int = 3
    hidden_units: int = 64
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be tanh or relu, got {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_weights(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def flatten(self, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate([np.concatenate([w.reshape(-1), b.reshape(-1)]) for w, b in layers])

    def unflatten(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        w = np.asarray(w)
        if w.shape[-1] != self.n_weights:
            raise EstimatorError(f"weight vector has {w.shape[-1]} entries, spec needs {self.n_weights}")
        out, k = [], 0
        for i, o in self.layer_shapes:
            W = w[..., k:k + i * o].reshape(w.shape[:-1] + (i, o))
            k += i * o
            b = w[..., k:k + o]
            k += o
            out.append((W, b))
        return out

    def build(self, w: nc.Node, h: nc.Node) -> tuple[nc.Node, list[nc.Node]]:
        """Graph for the network; ``w`` is (S, n_weights), ``h`` is (B, input_dim).

        Returns the (S, B, output_dim) output and the per-layer nodes.
        """
        act = nc.tanh if self.activation == "tanh" else nc.relu
        layers, k = [], 0
        n = len(self.layer_shapes)
        for li, (i, o) in enumerate(self.layer_shapes):
            W = nc.split_last(w[:, k:k + i * o], (i, o))
            k += i * o
            b = nc.split_last(w[:, k:k + o], (1, o))
            k += o
            h = nc.affine(h, W, b)
            if li < n - 1:
                h = act(h)
            layers.append(h)
        return h, layers

    def init(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Fan-in scaled normal weights with zero biases, shape (n, n_weights)."""
        parts = []
        for i, o in self.layer_shapes:
            parts.append(rng.standard_normal((n, i * o)) / math.sqrt(i))
            parts.append(np.zeros((n, o)))
        return np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def forward(self, v):
        return (np.asarray(v) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean

    @classmethod
    def from_box(cls, low, high) -> "Standardizer":
        """Mean and std of the uniform distribution on the box."""
        low, high = np.asarray(low, float), np.asarray(high, float)
        return cls((low + high) / 2.0, (high - low) / math.sqrt(12.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class PosteriorEstimator:
    """Estimator of p(theta | x, w) over the simulator's target parameters.

    ``theta_std``/``x_std`` standardize inputs and outputs; by default they
    come from the prior box and the observation support, so they do not
    depend on any training data and a prior tuned once serves every budget.
    """

    kind: str
    mlp: MlpSpec
    theta_dim: int
    x_dim: int
    prior_low: np.ndarray
    prior_high: np.ndarray
    theta_std: Standardizer
    x_std: Standardizer
    n_components: int = 8
    _graphs: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("MDN", "NRE"):
            raise EstimatorError(f"unknown estimator kind {self.kind!r}")

    @property
    def n_weights(self) -> int:
        return self.mlp.n_weights

    # -- graph construction ------------------------------------------------

    def _theta_leaf(self):
        return nc.leaf("theta", differentiable=False, shape=(None, self.theta_dim))

    def _x_leaf(self):
        return nc.leaf("x", differentiable=False, shape=(None, self.x_dim))

    def mixture_nodes(self, w: nc.Node, x: nc.Node):
        """MDN mixture log-weights, means and stds in standardized theta units.

        Shapes (S, B, K), (S, B, K, d), (S, B, K, d).
        """
        K, d = self.n_components, self.theta_dim
        zx = (x - self.x_std.mean) / self.x_std.std
        out, layers = self.mlp.build(w, zx)
        logw = nc.log_softmax(out[..., :K], axis=-1)
        mu = MEAN_BOUND * nc.tanh(nc.split_last(out[..., K:K + K * d], (K, d)))
        std = nc.exp(nc.split_last(out[..., K + K * d:], (K, d)))
        return logw, mu, std, layers

    def build_log_prob(self, w: nc.Node, theta: nc.Node, x: nc.Node):
        """(S, B) node with the log posterior density, plus the layer nodes.

        For NRE this is the raw score log r; the log prior is added outside
        the graph (it is constant inside the box).
        """
        if self.kind == "MDN":
            logw, mu, std, layers = self.mixture_nodes(w, x)
            zt = (theta - self.theta_std.mean) / self.theta_std.std
            zt = nc.split_last(zt, (1, self.theta_dim))
            comp = nc.diag_gaussian_logpdf(zt, mu, std)
            lp = nc.logsumexp(logw + comp, axis=-1) - float(np.sum(np.log(self.theta_std.std)))
            return lp, layers
        zt = (theta - self.theta_std.mean) / self.theta_std.std
        zx = (x - self.x_std.mean) / self.x_std.std
        out, layers = self.mlp.build(w, nc.concat([zt, zx], axis=-1))
        return out[..., 0], layers

    def build_data_term(self, w: nc.Node):
        """(S,) node: per-weight-sample sum over the batch of the training log-likelihood.

        MDN: sum_i log p(theta_i | x_i, w).
        NRE: minus the binary cross-entropy of joint pairs against pairs
        whose theta is taken from ``theta_marg`` (a derangement of the batch).
        """
        theta, x = self._theta_leaf(), self._x_leaf()
        if self.kind == "MDN":
            lp, _ = self.build_log_prob(w, theta, x)
            return nc.sum(lp, axis=-1)
        theta_m = nc.leaf("theta_marg", differentiable=False, shape=(None, self.theta_dim))
        s_joint, _ = self.build_log_prob(w, theta, x)
        s_marg, _ = self.build_log_prob(w, theta_m, x)
        return -nc.sum(nc.softplus(-s_joint) + nc.softplus(s_marg), axis=-1)

    def _graph(self, key: str):
        if key not in self._graphs:
            w = nc.leaf("w", differentiable=True, shape=(None, self.n_weights))
            if key == "log_prob":
                lp, layers = self.build_log_prob(w, self._theta_leaf(), self._x_leaf())
                self._graphs[key] = (nc.Graph(lp), layers)
            elif key == "mixture":
                logw, mu, std, layers = self.mixture_nodes(w, self._x_leaf())
                self._graphs[key] = (nc.Graph([logw, mu, std]), layers)
            else:
                raise KeyError(key)
        return self._graphs[key]

    # -- numeric evaluation ------------------------------------------------

    def _check_finite(self, ws, layers, values):
        for v in np.atleast_1d(values) if not isinstance(values, tuple) else values:
            if not np.all(np.isfinite(v) | (v == -np.inf)):
                for i, node in enumerate(layers):
                    if not np.all(np.isfinite(ws[node])):
                        raise EstimatorError(f"non-finite network output at layer {i} ({node.label})")
                raise EstimatorError("non-finite estimator output")

    def prior_logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, float)
        inside = np.all((theta >= self.prior_low) & (theta <= self.prior_high), axis=-1)
        return np.where(inside, -np.sum(np.log(self.prior_high - self.prior_low)), -np.inf)

    def log_posterior(self, theta: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """log p(theta | x, w).

        ``theta`` (B, d), ``x`` (B, k); ``w`` (n_weights,) gives (B,), a batch
        (S, n_weights) gives (S, B). Single vectors for theta/x are accepted.
        """
        theta = np.atleast_2d(np.asarray(theta, float))
        x = np.atleast_2d(np.asarray(x, float))
        if len(x) == 1 and len(theta) > 1:
            x = np.broadcast_to(x, (len(theta), x.shape[1]))
        w = np.asarray(w, float)
        single = w.ndim == 1
        graph, layers = self._graph("log_prob")
        ws = graph.workspace()
        out = ws.forward({"w": np.atleast_2d(w), "theta": theta, "x": x})
        self._check_finite(ws, layers, out)
        if self.kind == "NRE":
            out = out + self.prior_logpdf(theta)
        return out[0] if single else out

    def posterior_density(self, theta, x, w) -> np.ndarray:
        return np.exp(self.log_posterior(theta, x, w))

    def mixture(self, x: np.ndarray, w: np.ndarray):
        """MDN mixture in raw theta units for observations ``x`` (B, k).

        Returns log-weights (S, B, K), means and stds (S, B, K, d).
        """
        if self.kind != "MDN":
            raise EstimatorError("mixture parameters only exist for MDN estimators")
        graph, layers = self._graph("mixture")
        ws = graph.workspace()
        logw, mu, std = ws.forward({"w": np.atleast_2d(w), "x": np.atleast_2d(x)})
        self._check_finite(ws, layers, (logw, mu, std))
        m = self.theta_std.mean + mu * self.theta_std.std
        return logw, m, std * self.theta_std.std

    def init_weights(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return self.mlp.init(rng, n)

    # -- persistence -------------------------------------------------------

    def spec_json(self) -> dict:
        return {
            "kind": self.kind,
            "mlp": asdict(self.mlp),
            "theta_dim": self.theta_dim,
            "x_dim": self.x_dim,
            "n_components": self.n_components,
            "prior_low": self.prior_low.tolist(),
            "prior_high": self.prior_high.tolist(),
        }

    def standardization_json(self) -> dict:
        return {"theta": self.theta_std.to_json(), "x": self.x_std.to_json()}

    @classmethod
    def from_json(cls, spec: dict, standardization: dict) -> "PosteriorEstimator":
        return cls(
            spec["kind"], MlpSpec(**spec["mlp"]), spec["theta_dim"], spec["x_dim"],
            np.asarray(spec["prior_low"], float), np.asarray(spec["prior_high"], float),
            Standardizer.from_json(standardization["theta"]), Standardizer.from_json(standardization["x"]),
            spec["n_components"],
        )


def make_estimator(kind: str, sim: Simulator, hidden_layers: int = 3, hidden_units: int = 64,
                   activation: str = "tanh", n_components: int = 8) -> PosteriorEstimator:
    """Estimator over ``sim``'s target parameters with box-derived standardization."""
    kind = {"npe-mdn": "MDN", "npe": "MDN", "mdn": "MDN", "nre": "NRE"}.get(kind.lower(), kind)
    d, k = sim.target_dim, sim.x_dim
    if kind == "MDN":
        mlp = MlpSpec(k, n_components * (1 + 2 * d), hidden_layers, hidden_units, activation)
    elif kind == "NRE":
        mlp = MlpSpec(d + k, 1, hidden_layers, hidden_units, activation)
    else:
        raise EstimatorError(f"unknown estimator kind {kind!r}")
    return PosteriorEstimator(
        kind, mlp, d, k, sim.target_low.copy(), sim.target_high.copy(),
        Standardizer.from_box(sim.target_low, sim.target_high),
        Standardizer.from_box(sim.obs_low, sim.obs_high),
        n_components,
    )


# ---------------------------------------------------------------------------
# batching shared by MAP and VI training
# ---------------------------------------------------------------------------


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (a shuffled cyclic shift)."""
    if n < 2:
        raise EstimatorError("a derangement needs at least 2 elements")
    order = rng.permutation(n)
    out = np.empty(n, dtype=int)
    out[order] = np.roll(order, 1)
    return out


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def batch_inputs(est: PosteriorEstimator, thetas, xs, idx, rng) -> dict[str, np.ndarray]:
    inputs = {"theta": thetas[idx], "x": xs[idx]}
    if est.kind == "NRE":
        inputs["theta_marg"] = thetas[idx][derangement(len(idx), rng)]
    return inputs


def default_batch_size(n: int) -> int:
    return min(64, n)


def training_arrays(est: PosteriorEstimator, dataset: Dataset, sim: Simulator | None = None):
    """Target-parameter and observation arrays of ``dataset`` for ``est``."""
    thetas = dataset.thetas
    if sim is not None:
        thetas = dataset.target_thetas(sim)
    if thetas.shape[1] != est.theta_dim or dataset.xs.shape[1] != est.x_dim:
        raise EstimatorError(
            f"dataset dims ({thetas.shape[1]}, {dataset.xs.shape[1]}) do not match "
            f"estimator ({est.theta_dim}, {est.x_dim})")
    return thetas, dataset.xs


def train_map(est: PosteriorEstimator, dataset: Dataset, epochs: int = 500, lr: float = 1e-3,
              seed: int = 0, sim: Simulator | None = None, batch_size: int | None = None,
              init: np.ndarray | None = None) -> np.ndarray:
    """Maximum-likelihood weights by mini-batch Adam; deterministic given ``seed``."""
    thetas, xs = training_arrays(est, dataset, sim)
    n = len(thetas)
    if n == 0:
        raise EstimatorError("empty dataset")
    bs = batch_size or default_batch_size(n)
    rng = make_rng(seed)
    w0 = est.init_weights(rng)[0] if init is None else np.array(init, float)
    params = {"w": w0[None, :].copy()}
    w = nc.leaf("w", differentiable=True, shape=(1, est.n_weights))
    term = est.build_data_term(w)
    bsize = nc.leaf("batch_size", differentiable=False, shape=())
    graph = nc.Graph(-nc.sum(term) / bsize)
    opt = nc.Adam(params, lr=lr)
    for epoch in range(epochs):
        for idx in iterate_batches(n, bs, rng):
            inputs = batch_inputs(est, thetas, xs, idx, rng)
            inputs.update(params, batch_size=np.array(float(len(idx))))
            loss, grads = graph.value_and_grad(inputs)
            if not np.isfinite(loss):
                raise EstimatorError(f"non-finite loss {loss} at epoch {epoch}")
            opt.step(params, grads)
    return params["w"][0]


def data_log_likelihood(est: PosteriorEstimator, dataset: Dataset, w: np.ndarray,
                        sim: Simulator | None = None, seed: int = 0) -> float:
    """Sum of the training objective's per-example log-likelihood terms (see ``build_data_term``)."""
    thetas, xs = training_arrays(est, dataset, sim)
    if est.kind == "MDN":
        return float(np.sum(est.log_posterior(thetas, xs, w)))
    rng = make_rng(seed)
    marg = thetas[derangement(len(thetas), rng)]
    sj = est.log_posterior(thetas, xs, w) - est.prior_logpdf(thetas)
    sm = est.log_posterior(marg, xs, w) - est.prior_logpdf(marg)
    return float(-np.sum(np.logaddexp(0, -sj) + np.logaddexp(0, sm)))


def save_weights(path: str | Path, est: PosteriorEstimator, weights: np.ndarray, **extra) -> None:
    doc = {"spec": est.spec_json(), "standardization": est.standardization_json(),
           "weights": np.asarray(weights).tolist(), **extra}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_weights(path: str | Path) -> tuple[PosteriorEstimator, np.ndarray, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    est = PosteriorEstimator.from_json(doc["spec"], doc["standardization"])
    return est, np.asarray(doc["weights"], float), doc
