"""Monte Carlo evaluation of the linear Dirichlet problem.

For ``L1 u + q u = -F`` in D, ``u = phi`` on the boundary the path functional is

    phi(X_tau) + int_0^tau exp(int_0^t q(X_s) ds) F(X_t) dt

(the gauge weights only the forcing integral), and for the homogeneous
problem with the potential inside the operator it is
``exp(int_0^tau q ds) phi(X_tau)``.  Both integrals use left-point sums
over the Euler grid unless ``trapezoid`` is set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GaugeOverflow, NotExited, TooManyCensored
from .grid import as_points
from .problem import EllipticProblem, ScalarField
from .sde import PathSample, SimConfig, simulate_functionals

log = logging.getLogger(__name__)

GAUGE_LIMIT = 1e300
LOG_GAUGE_LIMIT = math.log(GAUGE_LIMIT)


@dataclass
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    n_censored: int = 0
    second_moment: float | None = None
    max_exponent: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def ci95(self) -> tuple[float, float]:
        return self.mean - 1.96 * self.std_error, self.mean + 1.96 * self.std_error

    @classmethod
    def from_samples(cls, samples: np.ndarray, n_censored: int = 0, **kw) -> "McEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        # heavy-tailed gauges may overflow the variance; inf is the honest answer
        with np.errstate(over="ignore", invalid="ignore"):
            mean = float(np.mean(samples))
            se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, se, n, n_censored, **kw)


# -- single-path functionals ------------------------------------------------


def _path_arrays(path: PathSample):
    if not path.exited:
        raise NotExited("path did not leave the domain before t_max")
    n = path.n_steps
    return path.states[:n], np.diff(path.times)[:n]


def _gauge_exponents(q: ScalarField, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Left-point Q(t_k) = sum_{j<k} q(X_j) dt_j, for k = 0..n."""
    if q.is_zero:
        return np.zeros(x.shape[0] + 1)
    return np.concatenate([[0.0], np.cumsum(q(x) * w)])


def path_functional_linear(path: PathSample, p: EllipticProblem) -> float:
    """phi(exit) + sum_k exp(Q(t_k)) F(X_k) dt_k."""
    x, w = _path_arrays(path)
    Q = _gauge_exponents(p.q, x, w)
    phi = p.phi(path.exit_point)
    if p.forcing.is_zero or x.shape[0] == 0:
        return float(phi)
    return float(phi + np.sum(np.exp(Q[:-1]) * p.forcing(x) * w))


def path_functional_boundary(path: PathSample, p: EllipticProblem) -> float:
    """phi(exit): the ungauged boundary term E_x[phi(X_tau)]."""
    _path_arrays(path)
    return float(p.phi(path.exit_point))


def path_functional_gauged(path: PathSample, p: EllipticProblem) -> float:
    """exp(Q(tau)) phi(exit)."""
    x, w = _path_arrays(path)
    Q = _gauge_exponents(p.q, x, w)
    return float(math.exp(Q[-1]) * p.phi(path.exit_point))


# -- batch observers ---------------------------------------------------------


class GaugeObserver:
    """Accumulates Q = int q ds and, optionally, int exp(Q) F ds per entry."""

    def __init__(self, m: int, q: ScalarField, forcing: ScalarField | None = None,
                 trapezoid: bool = False):
        self.q = None if q.is_zero else q
        self.forcing = None if forcing is None or forcing.is_zero else forcing
        self.trapezoid = trapezoid
        self.Q = np.zeros(m)
        self.I = np.zeros(m)
        self.Qmax = np.zeros(m)
        if trapezoid:
            self.prev_q = np.zeros(m)
            self.prev_h = np.zeros(m)
            self.prev_w = np.zeros(m)

    def step(self, ids, x, dtk, dm):
        if self.q is None and self.forcing is None:
            return
        qv = self.q.fn(x) if self.q is not None else None
        if not self.trapezoid:
            if self.forcing is not None:
                self.I[ids] += np.exp(self.Q[ids]) * self.forcing.fn(x) * dtk
            if qv is not None:
                Qn = self.Q[ids] + qv * dtk
                self.Q[ids] = Qn
                self.Qmax[ids] = np.maximum(self.Qmax[ids], Qn)
            return
        # trapezoid: close the previous interval now that its right end is known
        pw = self.prev_w[ids]
        if qv is not None:
            Qn = self.Q[ids] + 0.5 * (self.prev_q[ids] + qv) * pw
            self.Q[ids] = Qn
            self.Qmax[ids] = np.maximum(self.Qmax[ids], Qn)
            self.prev_q[ids] = qv
        if self.forcing is not None:
            h = np.exp(self.Q[ids]) * self.forcing.fn(x)
            self.I[ids] += 0.5 * (self.prev_h[ids] + h) * pw
            self.prev_h[ids] = h
        self.prev_w[ids] = dtk

    def close(self, exit_point: np.ndarray) -> None:
        """Trapezoid only: add the last interval, ending at the exit point."""
        if not self.trapezoid:
            return
        pw = self.prev_w
        if self.q is not None:
            self.Q += 0.5 * (self.prev_q + self.q.fn(exit_point)) * pw
            self.Qmax = np.maximum(self.Qmax, self.Q)
        if self.forcing is not None:
            h = np.exp(self.Q) * self.forcing.fn(exit_point)
            self.I += 0.5 * (self.prev_h + h) * pw


def _check_censoring(censored: np.ndarray, cfg: SimConfig, warnings: list[str]) -> np.ndarray:
    """Per-point censored counts; raises when the censored fraction is too high."""
    counts = censored.sum(axis=1)
    n = censored.shape[1]
    worst = int(counts.max()) if counts.size else 0
    if worst > cfg.censor_limit * n:
        raise TooManyCensored(worst, n, cfg.censor_limit)
    if worst:
        msg = f"{int(counts.sum())} censored paths used phi at their last interior point"
        warnings.append(msg)
        log.warning(msg)
    return counts


def _check_points(p: EllipticProblem, points) -> np.ndarray:
    pts, _ = as_points(points, p.d)
    inside = p.domain.contains(pts)
    if not np.all(inside):
        raise ConfigError(f"evaluation point {pts[np.argmin(inside)]} is outside the domain")
    return pts


def solve_linear(p: EllipticProblem, points, n_paths: int, cfg: SimConfig,
                 trapezoid: bool = False, workers: int | None = None) -> list[McEstimate]:
    """u(x) = E_x[phi(X_tau) + int_0^tau exp(int_0^t q) F(X_t) dt] at each point."""
    if p.mode != "linear":
        raise ConfigError("solve_linear needs a problem in linear mode")
    pts = _check_points(p, points)

    def make(m):
        return GaugeObserver(m, p.q, p.forcing, trapezoid)

    def finish(obs, res):
        obs.close(res.exit_point)
        _check_overflow(obs.Qmax)
        return p.phi.fn(res.exit_point) + obs.I

    values, censored = simulate_functionals(p, pts, n_paths, cfg, make, finish, workers=workers)
    warnings: list[str] = []
    counts = _check_censoring(censored, cfg, warnings)
    return [McEstimate.from_samples(values[i], int(counts[i]), warnings=list(warnings))
            for i in range(pts.shape[0])]


def solve_linear_gauged(p: EllipticProblem, points, n_paths: int, cfg: SimConfig,
                        trapezoid: bool = False, workers: int | None = None) -> list[McEstimate]:
    """u(x) = E_x[exp(int_0^tau q ds) phi(X_tau)]; the forcing is ignored."""
    pts = _check_points(p, points)

    def make(m):
        return GaugeObserver(m, p.q, None, trapezoid)

    def finish(obs, res):
        obs.close(res.exit_point)
        _check_overflow(obs.Qmax)
        return np.stack([np.exp(obs.Q) * p.phi.fn(res.exit_point), obs.Qmax], axis=1)

    values, censored = simulate_functionals(p, pts, n_paths, cfg, make, finish, workers=workers)
    warnings: list[str] = []
    counts = _check_censoring(censored, cfg, warnings)
    return [McEstimate.from_samples(values[i, :, 0], int(counts[i]),
                                    max_exponent=float(values[i, :, 1].max()),
                                    warnings=list(warnings))
            for i in range(pts.shape[0])]


def _check_overflow(qmax: np.ndarray) -> None:
    if qmax.size and np.max(qmax) > LOG_GAUGE_LIMIT:
        raise GaugeOverflow(
            f"gauge exp(int q) exceeded {GAUGE_LIMIT:g} on a path "
            f"(max exponent {np.max(qmax):.1f}); the exponential integrability "
            "hypothesis looks violated", float(np.max(qmax)))


def estimate_gauge(p: EllipticProblem, x, extra: ScalarField | None, n_paths: int,
                   cfg: SimConfig, workers: int | None = None) -> McEstimate:
    """E_x[exp(int_0^tau (q + extra)(X_s) ds)] with the largest path exponent.

    A heavy right tail shows up as ``max_exponent`` growing with the path
    count and a standard error comparable to the mean.
    """
    if extra is None or extra.is_zero:
        total = p.q
    elif p.q.is_zero:
        total = extra
    else:
        total = ScalarField(lambda y: p.q.fn(y) + extra.fn(y), p.d, name="q+extra")
    pts = _check_points(p, x)
    if pts.shape[0] != 1:
        raise ConfigError("estimate_gauge takes a single point")

    def make(m):
        return GaugeObserver(m, total)

    def finish(obs, res):
        _check_overflow(obs.Qmax)
        return np.stack([np.exp(obs.Q), obs.Qmax], axis=1)

    values, censored = simulate_functionals(p, pts, n_paths, cfg, make, finish, workers=workers)
    warnings: list[str] = []
    counts = _check_censoring(censored, cfg, warnings)
    return McEstimate.from_samples(values[0, :, 0], int(counts[0]),
                                   max_exponent=float(values[0, :, 1].max()),
                                   warnings=warnings)


def gauge_is_unstable(est: McEstimate, rel_se: float = 0.1, max_exponent: float = 20.0) -> bool:
    """Heuristic flag for a divergent gauge: large relative error or huge exponents.

    With a finite gauge the estimator has a light tail and the relative
    standard error falls like 1/sqrt(N); past the principal eigenvalue the
    mean is dominated by a few long paths.
    """
    rel = est.std_error / abs(est.mean) if est.mean else math.inf
    return rel > rel_se or (est.max_exponent is not None and est.max_exponent > max_exponent)
