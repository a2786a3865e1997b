"""Monte Carlo models of self-training bias amplification.

Two toy settings:

* a two-class categorical distribution ``p(theta) = (1/(1+e^theta), e^theta/(1+e^theta))``
  that repeatedly draws a batch from itself and takes a gradient step on
  ``KL(batch || p(theta))``;
* a 1-D logistic model ``g(x; b) = sigmoid(x + b)`` trained on its own
  thresholded pseudo-labels, whose expected gradient in ``b`` is written with
  two integrals ``Q0`` and ``Q1`` and evaluated by quadrature.
"""

import math
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import integrate, stats

from . import simplex
from .errors import ProbabilityOutOfRange, QuadratureNonConvergence, ThresholdOutOfRange
from .parallel import ordered_map

TRUTH = np.array([0.5, 0.5])
# cap on uniforms drawn at once per trajectory
_DRAW_CHUNK = 1 << 20


def _default_grid():
    return [float(x) for x in np.linspace(0.05, 0.95, 20)]


@dataclass(frozen=True)
class CategoricalSimConfig:
    p1_init_grid: list = field(default_factory=_default_grid)
    n: int = 4
    steps: int = 1000
    trajectories: int = 1000
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.steps < 0 or self.trajectories < 1:
            raise ValueError("steps must be >= 0 and trajectories >= 1")
        for p in self.p1_init_grid:
            if not 0.0 < p < 1.0:
                raise ProbabilityOutOfRange(f"grid point {p} not in (0, 1)")


@dataclass(frozen=True)
class TrajectoryResult:
    theta_init: float
    theta_final: float
    kl_init: float
    kl_final: float

    @property
    def amplified(self):
        return self.kl_final > self.kl_init


@dataclass(frozen=True)
class Amplification:
    probability: float
    stderr: float
    trajectories: int


def p1_of_theta(theta):
    # stable on both tails: exp never sees a large positive argument
    if theta >= 0:
        e = math.exp(-theta)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(theta))


def theta_init_of_p1(p1):
    if not 0.0 < p1 < 1.0:
        raise ProbabilityOutOfRange(f"p1 must lie in (0, 1), got {p1}")
    return math.log((1.0 - p1) / p1)


def kl_to_truth(theta):
    p1 = p1_of_theta(theta)
    return simplex.kl_divergence([p1, 1.0 - p1], TRUTH)


def categorical_update(theta, p1_batch, eta):
    """Gradient step on KL(batch || p(theta)): ``theta - eta * (p1_batch - p1(theta))``."""
    return theta - eta * (p1_batch - p1_of_theta(theta))


def categorical_step(theta, n, eta, rng):
    """Draw ``n`` samples from p(theta) and take one update step."""
    p1 = p1_of_theta(theta)
    count1 = np.count_nonzero(rng.random(n) < p1)
    return categorical_update(theta, count1 / n, eta)


def trajectory_rng(seed, grid_index, traj_index):
    """Counter-based stream keyed by (master seed, grid index, trajectory index)."""
    ss = np.random.SeedSequence([int(seed), int(grid_index), int(traj_index)])
    return np.random.Generator(np.random.Philox(ss))


def _grid_index(cfg, p1_init):
    try:
        return cfg.p1_init_grid.index(p1_init)
    except ValueError:
        raise ValueError(f"{p1_init} is not on the configured grid") from None


def run_trajectory(cfg, p1_init, traj_index, grid_index=None):
    """Apply ``cfg.steps`` categorical steps starting from ``p1_init``.

    Consumes the trajectory stream exactly as repeated ``categorical_step``
    calls would, but draws the uniforms in blocks.
    """
    if grid_index is None:
        grid_index = _grid_index(cfg, p1_init)
    rng = trajectory_rng(cfg.seed, grid_index, traj_index)
    theta0 = theta = theta_init_of_p1(p1_init)
    n, eta = cfg.n, cfg.eta
    rows_per_chunk = max(1, _DRAW_CHUNK // n)
    done = 0
    while done < cfg.steps:
        rows = min(rows_per_chunk, cfg.steps - done)
        draws = rng.random((rows, n))
        for k in range(rows):
            p1 = p1_of_theta(theta)
            theta = theta - eta * (np.count_nonzero(draws[k] < p1) / n - p1)
        done += rows
    return TrajectoryResult(theta0, theta, kl_to_truth(theta0), kl_to_truth(theta))


def amplification_probability(cfg, p1_init, grid_index=None):
    """Fraction of trajectories whose KL to (0.5, 0.5) ends above where it started."""
    if grid_index is None:
        grid_index = _grid_index(cfg, p1_init)
    hits = sum(
        run_trajectory(cfg, p1_init, j, grid_index).amplified for j in range(cfg.trajectories)
    )
    prob = hits / cfg.trajectories
    return Amplification(prob, math.sqrt(prob * (1.0 - prob) / cfg.trajectories), cfg.trajectories)


SWEEP_COLUMNS = ("p1_init", "n", "trajectories", "steps", "eta", "amplification_prob", "stderr")


def _sweep_task(cfg, task):
    n, grid_index = task
    sub = CategoricalSimConfig(cfg.p1_init_grid, n, cfg.steps, cfg.trajectories, cfg.eta, cfg.seed)
    p1 = cfg.p1_init_grid[grid_index]
    amp = amplification_probability(sub, p1, grid_index)
    return {
        "p1_init": p1,
        "n": n,
        "trajectories": cfg.trajectories,
        "steps": cfg.steps,
        "eta": cfg.eta,
        "amplification_prob": amp.probability,
        "stderr": amp.stderr,
    }


def sweep(cfg, ns, jobs=1):
    """One row per (n, grid point), ordered by n then grid index."""
    tasks = [(n, i) for n in ns for i in range(len(cfg.p1_init_grid))]
    return ordered_map(partial(_sweep_task, cfg), tasks, jobs)


# --- logistic self-training --------------------------------------------------


@dataclass(frozen=True)
class StandardNormal:
    mu: float = 0.0
    sigma: float = 1.0

    def pdf(self, x):
        return stats.norm.pdf(x, self.mu, self.sigma)

    def cdf(self, x):
        return stats.norm.cdf(x, self.mu, self.sigma)

    def window(self, tol=1e-14):
        # pdf < tol outside mu +- half
        half = self.sigma * math.sqrt(2.0 * math.log(1.0 / (tol * self.sigma * math.sqrt(2 * math.pi))))
        return self.mu - half, self.mu + half


@dataclass(frozen=True)
class GaussianMixture:
    """``(1 - weight1) * N(mu0, sigma^2) + weight1 * N(mu1, sigma^2)``."""

    mu0: float = -1.0
    mu1: float = 1.0
    sigma: float = 1.0
    weight1: float = 0.5

    def _parts(self):
        return ((1.0 - self.weight1, StandardNormal(self.mu0, self.sigma)),
                (self.weight1, StandardNormal(self.mu1, self.sigma)))

    def pdf(self, x):
        return sum(w * d.pdf(x) for w, d in self._parts())

    def cdf(self, x):
        return sum(w * d.cdf(x) for w, d in self._parts())

    def window(self, tol=1e-14):
        lo = [d.window(tol)[0] for _, d in self._parts()]
        hi = [d.window(tol)[1] for _, d in self._parts()]
        return min(lo), max(hi)


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def logistic_h(tau):
    """Logit of the threshold; pseudo-labels are assigned outside ``-b -+ h``."""
    if not 0.5 < tau < 1.0:
        raise ThresholdOutOfRange(f"tau must lie in (0.5, 1), got {tau}")
    return math.log(tau / (1.0 - tau))


def _quad(f, lo, hi):
    if hi <= lo:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, epsabs=1e-10, epsrel=1e-12, limit=500)
        except integrate.IntegrationWarning as exc:
            raise QuadratureNonConvergence(str(exc)) from exc
    if not math.isfinite(val) or err > 1e-10:
        raise QuadratureNonConvergence(f"quad error estimate {err:.3g} on [{lo}, {hi}]")
    return val


def logistic_Q(b, h, density, which):
    """``Q0 = int_{-inf}^{-b-h} p g`` or ``Q1 = int_{-b+h}^{inf} p (1-g)``."""
    lo, hi = density.window()
    if which == "Q0":
        return _quad(lambda x: density.pdf(x) * sigmoid(x + b), lo, min(-b - h, hi))
    if which == "Q1":
        return _quad(lambda x: density.pdf(x) * sigmoid(-(x + b)), max(-b + h, lo), hi)
    raise ValueError(f"which must be 'Q0' or 'Q1', got {which!r}")


@dataclass(frozen=True)
class LogisticSimConfig:
    tau: float = 0.95
    b_init: float = 0.5
    eta: float = 0.5
    steps: int = 200
    w0: float = 1.0
    w1: float = 1.0
    density: object = field(default_factory=StandardNormal)

    def __post_init__(self):
        logistic_h(self.tau)
        if self.w0 < 0 or self.w1 < 0:
            raise ValueError("class weights must be >= 0")


def logistic_step(b, cfg):
    """One gradient step on the weighted pseudo-label CE: ``b - eta (w0 Q0 - w1 Q1)``."""
    h = logistic_h(cfg.tau)
    q0 = logistic_Q(b, h, cfg.density, "Q0")
    q1 = logistic_Q(b, h, cfg.density, "Q1")
    return b - cfg.eta * (cfg.w0 * q0 - cfg.w1 * q1)


LOGISTIC_COLUMNS = ("step", "b", "Q0", "Q1", "p_yhat0", "p_yhat1")


def run_logistic(cfg):
    """Trace ``b`` and the pseudo-label masses for ``cfg.steps`` steps."""
    h = logistic_h(cfg.tau)
    b = cfg.b_init
    rows = []
    for step in range(cfg.steps + 1):
        q0 = logistic_Q(b, h, cfg.density, "Q0")
        q1 = logistic_Q(b, h, cfg.density, "Q1")
        rows.append({
            "step": step,
            "b": b,
            "Q0": q0,
            "Q1": q1,
            "p_yhat0": float(cfg.density.cdf(-b - h)),
            "p_yhat1": float(1.0 - cfg.density.cdf(-b + h)),
        })
        b = b - cfg.eta * (cfg.w0 * q0 - cfg.w1 * q1)
    return rows
