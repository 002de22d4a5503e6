"""Benchmark simulators with uniform box priors, dataset generation and CSV persistence.

Every simulator call receives its own random stream derived from
``(seed, row)`` through :class:`numpy.random.SeedSequence` feeding a PCG64
generator, so datasets are reproducible bit-for-bit and rows can be produced
in any order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

FLOAT_FMT = "{:.17g}"


def row_rng(seed: int, row: int) -> np.random.Generator:
    """Independent PCG64 stream for one dataset row."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(row)])))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


class SimulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Simulator:
    """Uniform-box prior plus a stochastic forward model.

    ``target`` selects the parameter columns the estimators infer (the
    marginal); the prior over those columns is again a uniform box.
    """

    name: str
    prior_low: np.ndarray
    prior_high: np.ndarray
    obs_low: np.ndarray
    obs_high: np.ndarray
    forward: Callable[[np.ndarray, np.random.Generator], np.ndarray] = field(repr=False)
    target: tuple[int, ...] | None = None

    def __post_init__(self):
        if not np.all(self.prior_low < self.prior_high):
            raise SimulatorError(f"{self.name}: prior_low must be < prior_high")

    @property
    def theta_dim(self) -> int:
        return len(self.prior_low)

    @property
    def x_dim(self) -> int:
        return len(self.obs_low)

    @property
    def target_index(self) -> np.ndarray:
        return np.arange(self.theta_dim) if self.target is None else np.asarray(self.target)

    @property
    def target_dim(self) -> int:
        return len(self.target_index)

    @property
    def target_low(self) -> np.ndarray:
        return self.prior_low[self.target_index]

    @property
    def target_high(self) -> np.ndarray:
        return self.prior_high[self.target_index]

    @property
    def target_density(self) -> float:
        """Constant prior density of the target marginal inside its box."""
        return float(1.0 / np.prod(self.target_high - self.target_low))

    def in_box(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.prior_low) & (theta <= self.prior_high), axis=-1)

    def prior_logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        inside = np.all((theta >= self.prior_low) & (theta <= self.prior_high), axis=-1)
        return np.where(inside, -np.sum(np.log(self.prior_high - self.prior_low)), -np.inf)

    def target_logpdf(self, theta: np.ndarray) -> np.ndarray:
        """Log prior density of the target marginal; ``theta`` holds target columns only."""
        theta = np.asarray(theta, dtype=float)
        lo, hi = self.target_low, self.target_high
        inside = np.all((theta >= lo) & (theta <= hi), axis=-1)
        return np.where(inside, -np.sum(np.log(hi - lo)), -np.inf)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise SimulatorError("n must be >= 1")
        return rng.uniform(self.prior_low, self.prior_high, size=(n, self.theta_dim))

    def simulate(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.theta_dim,):
            raise SimulatorError(f"{self.name}: theta must have shape ({self.theta_dim},)")
        if not self.in_box(theta)[0]:
            raise SimulatorError(f"{self.name}: theta {theta} outside the prior box")
        return np.asarray(self.forward(theta, rng), dtype=float)


# ---------------------------------------------------------------------------
# forward models
# ---------------------------------------------------------------------------


def two_moons_point(theta: np.ndarray, a: float, r: float) -> np.ndarray:
    """Two Moons observation for fixed latents (angle ``a``, radius ``r``)."""
    p = np.array([r * math.cos(a) + 0.25, r * math.sin(a)])
    t1, t2 = theta
    return p + np.array([-abs(t1 + t2) / math.sqrt(2.0), (-t1 + t2) / math.sqrt(2.0)])


def _two_moons(theta, rng):
    a = rng.uniform(-math.pi / 2, math.pi / 2)
    r = rng.normal(0.1, 0.01)
    return two_moons_point(theta, a, r)


def slcp_covariance(theta: np.ndarray) -> np.ndarray:
    s1 = max(theta[2] ** 2, 1e-3)
    s2 = max(theta[3] ** 2, 1e-3)
    rho = math.tanh(theta[4])
    return np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])


def slcp_points(theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Four SLCP points from standard-normal latents ``z`` of shape (4, 2)."""
    chol = np.linalg.cholesky(slcp_covariance(theta))
    return (theta[:2] + z @ chol.T).reshape(-1)


def _slcp(theta, rng):
    return slcp_points(theta, rng.standard_normal((4, 2)))


def _gaussian_linear(theta, rng):
    return theta + 0.25 * rng.standard_normal(2)


LV_INIT = (50, 100)
LV_T_END = 30.0
LV_GRID = 201
LV_MAX_EVENTS = 100_000


def gillespie_lotka_volterra(log_rates: np.ndarray, rng: np.random.Generator,
                             init=LV_INIT, t_end=LV_T_END, n_grid=LV_GRID,
                             max_events=LV_MAX_EVENTS) -> np.ndarray:
    """Predator-prey Markov jump process recorded on a uniform time grid.

    Events: prey birth (c1 X), predation (c2 X Y), predator birth (c3 X Y),
    predator death (c4 Y). Returns an integer array of shape (n_grid, 2).
    Past ``max_events`` events the state is frozen for the rest of the grid.
    """
    c1, c2, c3, c4 = np.exp(log_rates)
    x, y = init
    grid = np.linspace(0.0, t_end, n_grid)
    out = np.empty((n_grid, 2), dtype=np.int64)
    t, k, events = 0.0, 0, 0
    while k < n_grid:
        rates = (c1 * x, c2 * x * y, c3 * x * y, c4 * y)
        total = rates[0] + rates[1] + rates[2] + rates[3]
        if total <= 0.0 or events >= max_events:
            out[k:] = (x, y)
            break
        t_next = t + rng.exponential(1.0 / total)
        while k < n_grid and grid[k] < t_next:
            out[k] = (x, y)
            k += 1
        u = rng.uniform() * total
        if u < rates[0]:
            x += 1
        elif u < rates[0] + rates[1]:
            x -= 1
        elif u < rates[0] + rates[1] + rates[2]:
            y += 1
        else:
            y -= 1
        t = t_next
        events += 1
    return out


def _autocorr(s: np.ndarray, lag: int) -> float:
    a, b = s[:-lag], s[lag:]
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def lv_summary(series: np.ndarray) -> np.ndarray:
    """Nine summary features of a (T, 2) prey/predator series."""
    xs = series[:, 0].astype(float)
    ys = series[:, 1].astype(float)
    feats = [
        math.log1p(xs.mean()), math.log1p(ys.mean()),
        math.log1p(xs.var()), math.log1p(ys.var()),
        _autocorr(xs, 1), _autocorr(xs, 2), _autocorr(ys, 1), _autocorr(ys, 2),
    ]
    sx, sy = xs.std(), ys.std()
    feats.append(0.0 if sx == 0 or sy == 0 else float(np.mean((xs - xs.mean()) * (ys - ys.mean())) / (sx * sy)))
    return np.array(feats)


def _lotka_volterra(theta, rng):
    return lv_summary(gillespie_lotka_volterra(theta, rng))


# Observation support bounds: per-feature min/max of pilot draws widened by 10%
# of the range on each side. Regenerate with ``pilot_obs_bounds``.
_OBS_BOUNDS = {
    "two_moons": (
        [-1.2972065590395674, -1.7808778125963918],
        [0.5174322747982464, 1.7269459852525038],
    ),
    "slcp": (
        [-35.148623804217394, -30.440744270050985, -28.25564586842016, -36.09089368951609, -35.5684737869228, -30.558962480242787, -32.9028056536986, -30.815165514986923],
        [34.00383562435515, 30.579914926910256, 38.56416499015437, 30.67572977599074, 33.76247366548888, 29.686381670899255, 32.48338959139536, 36.972286865938244],
    ),
    "gaussian_linear": (
        [-2.148454470620047, -2.1160729198356867],
        [2.1498076140176505, 1.9547537930700005],
    ),
    "lotka_volterra": (
        [-0.8833553440470032, 0.16956937684296047, 0.6983216329782795, 3.6086944509477488, -0.0999992523188872, -0.09999864093124688, 0.7545873955864586, 0.7593504003781479, -0.5146299787526125],
        [12.382685157389533, 9.142159999215396, 23.439945070392223, 14.569229552390501, 1.0999917755077593, 1.0999850502437156, 1.0220346369781805, 1.0213985546339466, 0.8967574499750623],
    ),
}

PILOT_DRAWS = {"two_moons": 10_000, "slcp": 10_000, "gaussian_linear": 10_000, "lotka_volterra": 500}


def _make(name, low, high, forward, target=None) -> Simulator:
    olo, ohi = _OBS_BOUNDS[name]
    return Simulator(name, np.asarray(low, float), np.asarray(high, float),
                     np.asarray(olo, float), np.asarray(ohi, float), forward, target)


def two_moons() -> Simulator:
    return _make("two_moons", [-1, -1], [1, 1], _two_moons)


def slcp() -> Simulator:
    return _make("slcp", [-3] * 5, [3] * 5, _slcp, target=(0, 1))


def gaussian_linear() -> Simulator:
    """Validation oracle: x = theta + N(0, 0.25^2 I), theta ~ U(-1, 1)^2."""
    return _make("gaussian_linear", [-1, -1], [1, 1], _gaussian_linear)


def lotka_volterra() -> Simulator:
    """Parameters are natural-log rates; inference targets the predator pair."""
    return _make("lotka_volterra", [-4] * 4, [1] * 4, _lotka_volterra, target=(2, 3))


SIMULATORS: dict[str, Callable[[], Simulator]] = {
    "two_moons": two_moons,
    "slcp": slcp,
    "gaussian_linear": gaussian_linear,
    "lotka_volterra": lotka_volterra,
}


def get_simulator(name: str) -> Simulator:
    try:
        return SIMULATORS[name]()
    except KeyError:
        raise SimulatorError(f"unknown simulator {name!r}; choose from {sorted(SIMULATORS)}") from None


def pilot_obs_bounds(sim: Simulator, n: int, seed: int = 12345, widen: float = 0.1):
    """Per-feature observation range over ``n`` joint draws, widened by ``widen`` of the range."""
    xs = np.stack([sim.simulate(sim.sample_prior(1, r)[0], r)
                   for r in (row_rng(seed, i) for i in range(n))])
    lo, hi = xs.min(axis=0), xs.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo - widen * span, hi + widen * span


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    simulator: str
    thetas: np.ndarray
    xs: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.thetas) != len(self.xs):
            raise ValueError("thetas and xs must have the same number of rows")

    def __len__(self):
        return len(self.thetas)

    def target_thetas(self, sim: Simulator) -> np.ndarray:
        return self.thetas[:, sim.target_index]

    def save(self, path: str | Path, **extra) -> None:
        """Write ``path`` (CSV) and ``path`` with a ``.json`` suffix (metadata plus ``extra``)."""
        path = Path(path)
        d, k = self.thetas.shape[1], self.xs.shape[1]
        header = [f"theta_{i}" for i in range(d)] + [f"x_{i}" for i in range(k)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in np.hstack([self.thetas, self.xs]):
                w.writerow([FLOAT_FMT.format(v) for v in row])
        meta = {"simulator": self.simulator, "budget": len(self), "seed": self.seed,
                "theta_dim": d, "x_dim": k, **extra}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d = meta["theta_dim"]
        return cls(meta["simulator"], data[:, :d], data[:, d:], meta["seed"])


def generate_dataset(sim: Simulator, budget: int, seed: int) -> Dataset:
    """``budget`` i.i.d. joint draws; row ``i`` uses the stream ``(seed, i)``."""
    if budget < 1:
        raise SimulatorError("budget must be >= 1")
    thetas = np.empty((budget, sim.theta_dim))
    xs = np.empty((budget, sim.x_dim))
    for i in range(budget):
        rng = row_rng(seed, i)
        thetas[i] = sim.sample_prior(1, rng)[0]
        xs[i] = sim.simulate(thetas[i], rng)
    return Dataset(sim.name, thetas, xs, seed)


# ---------------------------------------------------------------------------
# Gaussian-linear oracle
# ---------------------------------------------------------------------------

GL_NOISE = 0.25


@dataclass(frozen=True)
class AnalyticPosterior:
    """N(x, 0.25^2 I) truncated to the prior box."""

    mean: np.ndarray
    cov: np.ndarray
    low: np.ndarray
    high: np.ndarray


def analytic_posterior(sim: Simulator, x: np.ndarray) -> AnalyticPosterior:
    if sim.name != "gaussian_linear":
        raise SimulatorError(f"analytic posterior only exists for gaussian_linear, not {sim.name}")
    x = np.asarray(x, float)
    return AnalyticPosterior(x.copy(), GL_NOISE ** 2 * np.eye(2), sim.prior_low.copy(), sim.prior_high.copy())


if __name__ == "__main__":  # pragma: no cover
    for name, n in PILOT_DRAWS.items():
        lo, hi = pilot_obs_bounds(SIMULATORS[name](), n)
        print(name, [float(v) for v in lo], [float(v) for v in hi])
