"""Calibration and quality metrics for posterior approximations.

Models are duck-typed. Everything needs ``log_prob(theta, x) -> (B,)``.
Grid methods use ``grid_member_densities(x, axes) -> (M, G1, ..., Gd)`` when
available and otherwise evaluate ``member_log_prob`` / ``log_prob`` on the
grid points. The sample method needs ``sample(x, n, rng)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import ndtr

from .simulators import FLOAT_FMT, Simulator, make_rng

TIE_RTOL = 1e-12


class DiagnosticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProductGrid:
    """Cell-centre grid over a box, ``resolution`` cells per axis."""

    low: np.ndarray
    high: np.ndarray
    resolution: int = 200

    @property
    def axes(self) -> list[np.ndarray]:
        out = []
        for lo, hi in zip(self.low, self.high):
            h = (hi - lo) / self.resolution
            out.append(lo + h * (np.arange(self.resolution) + 0.5))
        return out

    @property
    def cell_volume(self) -> float:
        return float(np.prod((np.asarray(self.high) - np.asarray(self.low)) / self.resolution))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * len(self.low)

    @classmethod
    def for_simulator(cls, sim: Simulator, resolution: int = 200) -> "ProductGrid":
        return cls(sim.target_low.copy(), sim.target_high.copy(), resolution)


def member_grid_densities(model, x: np.ndarray, grid: ProductGrid) -> np.ndarray:
    """(M, *grid.shape) per-member densities of ``model`` at observation ``x``."""
    if len(grid.low) > 2:
        raise DiagnosticsError("grid methods need theta_dim <= 2")
    if hasattr(model, "grid_member_densities"):
        return model.grid_member_densities(x, grid.axes)
    pts = grid.points
    xs = np.broadcast_to(np.asarray(x, float), (len(pts), len(x)))
    if hasattr(model, "member_log_prob"):
        lp = np.atleast_2d(model.member_log_prob(pts, xs))
    else:
        lp = np.asarray(model.log_prob(pts, xs))[None]
    return np.exp(lp).reshape((len(lp),) + grid.shape)


def grid_density(model, x, grid: ProductGrid) -> np.ndarray:
    return member_grid_densities(model, x, grid).mean(axis=0)


def _credibility_split(masses: np.ndarray, dens: np.ndarray, d_star: float) -> tuple[float, float]:
    """(mass strictly above ``d_star``, mass tied with it), both normalized."""
    total = masses.sum()
    if not total > 0:
        raise DiagnosticsError("density has zero total mass on the grid")
    tie = np.isclose(dens, d_star, rtol=TIE_RTOL, atol=0.0)
    above = (dens > d_star) & ~tie
    return float(masses[above].sum() / total), float(masses[tie].sum() / total)


def credibility_split(model, theta_star, x, method: str = "grid", resolution: int = 200,
                      grid: ProductGrid | None = None, n_samples: int = 2000,
                      rng: np.random.Generator | None = None, low=None, high=None) -> tuple[float, float]:
    """Credibility of ``theta_star`` as (strictly-higher mass, tied mass)."""
    theta_star = np.atleast_2d(np.asarray(theta_star, float))
    x = np.asarray(x, float)
    d_star = float(np.exp(model.log_prob(theta_star, x[None])[0]))
    if method == "grid":
        if grid is None:
            if low is None or high is None:
                raise DiagnosticsError("grid method needs a grid or box bounds")
            grid = ProductGrid(np.asarray(low, float), np.asarray(high, float), resolution)
        dens = grid_density(model, x, grid)
        return _credibility_split(dens * grid.cell_volume, dens, d_star)
    if method == "sample":
        if not hasattr(model, "sample"):
            raise DiagnosticsError("sample method needs a model with a sampler")
        s = model.sample(x, n_samples, rng or make_rng(0))
        dens = np.exp(model.log_prob(s, np.broadcast_to(x, (len(s), len(x)))))
        return _credibility_split(np.ones(len(s)), dens, d_star)
    raise DiagnosticsError(f"unknown method {method!r}")


def hpd_credibility(model, theta_star, x, method: str = "grid", resolution: int = 200,
                    grid: ProductGrid | None = None, n_samples: int = 2000,
                    rng: np.random.Generator | None = None, low=None, high=None) -> float:
    """Smallest HPD level whose region contains ``theta_star``.

    grid: normalized grid mass of cells whose density exceeds p(theta*|x).
    sample: fraction of posterior samples whose density exceeds p(theta*|x).
    Exact ties (flat densities) are broken uniformly at random.
    """
    rng = rng or make_rng(0)
    above, tie = credibility_split(model, theta_star, x, method, resolution, grid, n_samples, rng, low, high)
    return above + rng.uniform() * tie


@dataclass
class CoverageCurve:
    alphas: np.ndarray
    ec: np.ndarray
    auc: float
    n_test: int
    credibilities: np.ndarray = field(repr=False, default=None)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "ec"])
            for a, e in zip(self.alphas, self.ec):
                w.writerow([FLOAT_FMT.format(a), FLOAT_FMT.format(e)])


def default_alphas() -> np.ndarray:
    return np.linspace(0.0, 1.0, 101)


def coverage_from_credibilities(cred: np.ndarray, alphas: np.ndarray | None = None,
                                ties: np.ndarray | None = None) -> CoverageCurve:
    """ec(alpha) = fraction of credibility levels <= alpha, with ec(0)=0 and ec(1)=1.

    With ``ties`` each level is spread uniformly over [cred, cred + tie], the
    average over a uniformly drawn tie-break.
    """
    alphas = default_alphas() if alphas is None else np.asarray(alphas, float)
    cred = np.asarray(cred, float)
    if ties is None:
        ties = np.zeros_like(cred)
    ties = np.asarray(ties, float)
    a, c, t = alphas[:, None], cred[None, :], ties[None, :]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        spread = np.clip((a - c) / t, 0.0, 1.0)
    ec = np.mean(np.where(t > 0, spread, c <= a), axis=1)
    ec[alphas <= 0.0] = 0.0
    ec[alphas >= 1.0] = 1.0
    auc = float(trapezoid(ec - alphas, alphas))
    return CoverageCurve(alphas, ec, auc, len(cred), cred + 0.5 * ties)


def expected_coverage(model, thetas: np.ndarray, xs: np.ndarray, alphas=None, method: str = "grid",
                      grid: ProductGrid | None = None, seed: int = 0, n_samples: int = 2000) -> CoverageCurve:
    """Expected coverage of the HPD regions of ``model`` over joint test pairs."""
    rng = make_rng(seed)
    parts = np.array([
        credibility_split(model, t, x, method=method, grid=grid, rng=rng, n_samples=n_samples)
        for t, x in zip(thetas, xs)
    ]).reshape(-1, 2)
    return coverage_from_credibilities(parts[:, 0], alphas, parts[:, 1])


def binomial_band(alphas: np.ndarray, n: int, level: float = 0.99):
    """Pointwise central ``level`` band for ec(alpha) of a calibrated model."""
    lo = stats.binom.ppf((1 - level) / 2, n, alphas) / n
    hi = stats.binom.ppf(1 - (1 - level) / 2, n, alphas) / n
    return lo, hi


@dataclass(frozen=True)
class NominalLogProb:
    value: float
    n_neg_inf: int
    n: int


def nominal_log_prob(model, thetas, xs) -> NominalLogProb:
    """Mean log density at the generating parameters; -inf terms are counted, not averaged."""
    lp = np.asarray(model.log_prob(np.asarray(thetas, float), np.asarray(xs, float)), float)
    if len(lp) == 0:
        raise DiagnosticsError("empty test set")
    finite = np.isfinite(lp)
    value = float(np.mean(lp[finite])) if finite.any() else -math.inf
    return NominalLogProb(value, int(np.sum(~finite)), len(lp))


@dataclass(frozen=True)
class UncertaintyReport:
    predictive_entropy: float
    aleatoric: float
    epistemic: float


def _entropy(p: np.ndarray, vol: float) -> float:
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])) * vol)


def decompose_single(members: np.ndarray, vol: float) -> UncertaintyReport:
    """Entropy split for one observation from (M, *grid) member densities.

    Each member is normalized on the grid; the predictive density is the
    grid-normalized average, i.e. members weighted by their mass in the box.
    """
    members = np.asarray(members, float)
    flat = members.reshape(len(members), -1)
    z = flat.sum(axis=1) * vol
    if not np.all(np.isfinite(z)) or not z.sum() > 0:
        raise DiagnosticsError("members have no finite mass on the grid")
    keep = z > 0
    pis = z[keep] / z[keep].sum()
    normed = flat[keep] / z[keep, None]
    pred = np.einsum("m,mg->g", pis, normed)
    h_members = np.array([_entropy(p, vol) for p in normed])
    h_pred = _entropy(pred, vol)
    alea = float(np.dot(pis, h_members))
    return UncertaintyReport(h_pred, alea, h_pred - alea)


def decompose_uncertainty(bma, xs: np.ndarray, grid: ProductGrid) -> UncertaintyReport:
    """Predictive, aleatoric and epistemic entropy (nats) averaged over ``xs``."""
    reps = []
    for x in np.atleast_2d(xs):
        r = decompose_single(member_grid_densities(bma, x, grid), grid.cell_volume)
        if not all(np.isfinite([r.predictive_entropy, r.aleatoric])):
            raise DiagnosticsError(f"non-finite entropy at x={x}")
        reps.append(r)
    return UncertaintyReport(*(float(np.mean([getattr(r, f) for r in reps]))
                               for f in ("predictive_entropy", "aleatoric", "epistemic")))


# ---------------------------------------------------------------------------
# reference models
# ---------------------------------------------------------------------------


@dataclass
class PriorPosterior:
    """Pseudo-model returning the prior density p(theta) for every x."""

    sim: Simulator

    def log_prob(self, theta, x):
        return self.sim.target_logpdf(np.atleast_2d(theta))

    def grid_member_densities(self, x, axes):
        shape = tuple(len(a) for a in axes)
        return np.full((1,) + shape, self.sim.target_density)

    def sample(self, x, n, rng):
        return rng.uniform(self.sim.target_low, self.sim.target_high, size=(n, self.sim.target_dim))


@dataclass
class TruncatedGaussianPosterior:
    """Diagonal Gaussian N(mean(x), std^2) truncated to a box; mean(x) = x by default."""

    std: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def _logz(self, mean):
        a = ndtr((self.high - mean) / self.std) - ndtr((self.low - mean) / self.std)
        return np.sum(np.log(a), axis=-1)

    def log_prob(self, theta, x):
        theta = np.atleast_2d(theta)
        x = np.atleast_2d(x)
        z = (theta - x) / self.std
        lp = np.sum(-0.5 * z * z - np.log(self.std) - 0.5 * math.log(2 * math.pi), axis=-1) - self._logz(x)
        inside = np.all((theta >= self.low) & (theta <= self.high), axis=-1)
        return np.where(inside, lp, -np.inf)

    def sample(self, x, n, rng):
        out = np.empty((0, len(self.low)))
        while len(out) < n:
            s = x + self.std * rng.standard_normal((4 * n, len(self.low)))
            s = s[np.all((s >= self.low) & (s <= self.high), axis=1)]
            out = np.vstack([out, s])
        return out[:n]

    @classmethod
    def from_analytic(cls, post) -> "TruncatedGaussianPosterior":
        return cls(np.sqrt(np.diag(post.cov)), post.low, post.high)


def grid_kl(p_dens: np.ndarray, q_dens: np.ndarray, vol: float) -> float:
    """KL(p || q) between two grid densities after normalizing both on the grid."""
    p = p_dens / (p_dens.sum() * vol)
    q = q_dens / (q_dens.sum() * vol)
    nz = p > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))) * vol)
