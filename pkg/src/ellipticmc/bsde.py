"""Semilinear Dirichlet problems by Picard iteration on a grid.

Along the L1-diffusion the solution satisfies the BSDE

    Y_t = phi(X_tau) + int_t^tau f(X_s, Y_s, Z_s) ds - int_t^tau <Z_s, dM_s>

with Y_t = u(X_t) and Z_t = grad u(X_t).  Freezing (Y, Z) at the previous
iterate turns one Picard step into a linear Feynman-Kac solve at every
interior grid node.  The potential q is folded into the driver, so the paths
carry no exponential weight.

u and grad u between nodes come from one C1 cubic Hermite reconstruction
whose nodal slopes are central differences of the nodal values.  By default
the martingale term sum <grad u_prev, dM> is kept in the estimator: it has
mean zero, so the expectation is unchanged, and it removes most of the
variance once the iterate is close to the solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DriverBlowup, NoConvergence
from .feynman_kac import McEstimate, _check_censoring, _check_overflow, GaugeObserver
from .grid import GridFunction, HermiteSampler, as_points, grid_nodes
from .problem import Driver, EllipticProblem, ScalarField, fold_q_into_driver
from .sde import SimConfig, simulate_functionals

log = logging.getLogger(__name__)

SLOPE_STEP = 1e-4
ROUNDOFF = 1e-13


@dataclass(frozen=True)
class PicardConfig:
    """Grid, sampling and stopping parameters of the Picard solver.

    ``tol_sup=None`` stops at twice the noise floor (3 x the largest node
    standard error).  The tolerance never drops below 1e-13 (1 + sup |u|).  ``theta="auto"`` picks 2 / (2 + L T) from the
    y-Lipschitz constant L of the driver at the initial guess and the largest
    node mean exit time T; it is 1 for drivers that do not depend on y.
    ``control_variate="auto"`` uses the martingale control variate unless the
    driver is zero, so that f = 0 gives the plain harmonic-extension estimate
    in a single iteration; ``True`` forces it on, which sharpens a zero-driver
    field at the cost of a second sweep.
    """

    dims: tuple[int, ...]
    n_paths: int = 2000
    dt: float = 1e-3
    seed: int = 0
    max_iters: int = 15
    tol_sup: float | None = None
    theta: float | str = "auto"
    t_max: float = 50.0
    bridge_correction: bool = True
    div_step: float = 1e-5
    censor_limit: float = 1e-3
    control_variate: bool | str = "auto"
    blowup: float = 1e12
    workers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if any(n < 3 for n in self.dims):
            raise ConfigError("Picard grids need at least 3 nodes per axis")
        if self.n_paths < 2 or self.max_iters < 1:
            raise ConfigError("need n_paths >= 2 and max_iters >= 1")
        if self.tol_sup is not None and not self.tol_sup > 0:
            raise ConfigError("tol_sup must be positive")
        if self.theta != "auto" and not (0 < float(self.theta) <= 1):
            raise ConfigError("damping theta must lie in (0, 1]")
        if self.control_variate not in (True, False, "auto"):
            raise ConfigError("control_variate must be true, false or 'auto'")

    def sim_config(self) -> SimConfig:
        return SimConfig(dt=self.dt, t_max=self.t_max, bridge_correction=self.bridge_correction,
                         div_step=self.div_step, seed=self.seed, censor_limit=self.censor_limit)


@dataclass
class ConvergenceTrace:
    sup_diffs: list[float] = field(default_factory=list)
    noise_floors: list[float] = field(default_factory=list)
    theta: float = 1.0
    tol: float = 0.0
    converged: bool = False
    node_se: np.ndarray | None = None
    mean_exit_max: float = 0.0
    lipschitz_y: float = 0.0
    sup_norm: float = 0.0
    sup_ratio: float = 0.0
    n_censored: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.sup_diffs)

    def to_rows(self) -> list[tuple[int, float, float]]:
        return [(k + 1, d, f) for k, (d, f) in enumerate(zip(self.sup_diffs, self.noise_floors))]


@dataclass(frozen=True)
class NodeLayout:
    lo: np.ndarray
    hi: np.ndarray
    dims: tuple[int, ...]
    nodes: np.ndarray
    interior: np.ndarray
    boundary_values: np.ndarray

    @property
    def interior_nodes(self) -> np.ndarray:
        return self.nodes[self.interior]

    def grid(self, interior_values) -> GridFunction:
        vals = self.boundary_values.copy()
        vals[self.interior] = interior_values
        return GridFunction(self.lo, self.hi, vals.reshape(self.dims))


def node_layout(p: EllipticProblem, dims) -> NodeLayout:
    """Grid over the bounding box of D; nodes not inside D hold phi."""
    lo, hi = p.domain.bounding_box
    dims = tuple(int(n) for n in dims)
    if len(dims) != p.d:
        raise ConfigError(f"grid needs {p.d} dims, got {len(dims)}")
    nodes = grid_nodes(lo, hi, dims)
    interior = np.asarray(p.domain.contains(nodes), dtype=bool)
    if not np.any(interior):
        raise ConfigError("grid has no node inside the domain")
    bvals = np.zeros(nodes.shape[0])
    bvals[~interior] = p.phi(nodes[~interior])
    return NodeLayout(lo, hi, dims, nodes, interior, bvals)


def problem_driver(p: EllipticProblem) -> Driver:
    """The L1-driver of ``p``: q folded into f, or q y + F in linear mode."""
    if p.mode == "semilinear":
        return fold_q_into_driver(p)
    q, F = p.q, p.forcing
    if q.is_zero and F.is_zero:
        return Driver.zero(p.d)
    if q.is_zero:
        return Driver(lambda x, y, z: F.fn(x) + 0.0 * y, ScalarField.zero(p.d), name="F")
    return Driver(lambda x, y, z: q.fn(x) * y + F.fn(x),
                  ScalarField(lambda x: -q.fn(x), p.d), name="q*y+F")


class DriverObserver:
    """Accumulates int f(X, u(X), grad u(X)) ds and sum <grad u(X_k), dM_k>."""

    def __init__(self, m: int, driver: Driver, sampler: HermiteSampler, control_variate: bool,
                 blowup: float):
        self.driver = driver
        self.sampler = sampler
        self.cv = control_variate
        self.blowup = blowup
        self.I = np.zeros(m)
        self.M = np.zeros(m)
        self.fmax = 0.0
        self.active = not driver.is_zero or control_variate

    def step(self, ids, x, dtk, dm):
        if not self.active:
            return
        y, z = self.sampler.sample(x)
        if not self.driver.is_zero:
            fv = np.asarray(self.driver.f(x, y, z), dtype=float)
            fm = float(np.max(np.abs(fv))) if fv.size else 0.0
            if not fm <= self.blowup:
                k = int(np.argmax(~(np.abs(fv) <= self.blowup)))
                raise DriverBlowup(f"|f| = {abs(fv[k]):.3g} at x = {x[k]} exceeds {self.blowup:g}; "
                                   "the iteration is diverging")
            self.fmax = max(self.fmax, fm)
            self.I[ids] += fv * dtk
        if self.cv:
            self.M[ids] += np.einsum("ij,ij->i", z, dm)


def _sweep(p: EllipticProblem, driver: Driver, u_prev: GridFunction, cfg: PicardConfig,
           layout: NodeLayout, cv: bool):
    """One frozen-driver solve at the interior nodes: (mean, se, censored)."""
    sampler = HermiteSampler(u_prev)
    sim = cfg.sim_config()

    def make(m):
        return DriverObserver(m, driver, sampler, cv, cfg.blowup)

    def finish(obs, res):
        return p.phi.fn(res.exit_point) + obs.I - obs.M

    values, censored = simulate_functionals(p, layout.interior_nodes, cfg.n_paths, sim, make,
                                            finish, workers=cfg.workers)
    warnings: list[str] = []
    counts = _check_censoring(censored, sim, warnings)
    mean = values.mean(axis=1)
    se = values.std(axis=1, ddof=1) / math.sqrt(cfg.n_paths)
    return mean, se, int(counts.sum()), warnings


def picard_step(p: EllipticProblem, u_prev: GridFunction, cfg: PicardConfig,
                return_stats: bool = False):
    """u_new(x) = E_x[phi(X_tau) + int f(X, u_prev(X), grad u_prev(X)) ds] at interior nodes.

    Non-interior nodes carry phi.  The root seed is the same on every call,
    so successive steps see the same paths.  With the control variate the
    mean-zero term sum <grad u_prev, dM> is subtracted pathwise; under the
    default ``control_variate="auto"`` a zero driver never uses it, so the
    step is then independent of u_prev.
    """
    layout = node_layout(p, u_prev.dims)
    driver = problem_driver(p)
    mean, se, n_cens, warnings = _sweep(p, driver, u_prev, cfg, layout, _use_cv(cfg, driver))
    g = layout.grid(mean)
    if return_stats:
        return g, se, n_cens, warnings
    return g


def _use_cv(cfg: PicardConfig, driver: Driver) -> bool:
    if cfg.control_variate == "auto":
        return not driver.is_zero
    return bool(cfg.control_variate)


def initial_guess(p: EllipticProblem, cfg: PicardConfig, layout: NodeLayout):
    """Gauged harmonic extension E_x[exp(int q) phi(X_tau)] at the interior nodes.

    Also returns the node mean exit times used by the automatic damping.
    """
    sim = cfg.sim_config()

    def make(m):
        return GaugeObserver(m, p.q)

    def finish(obs, res):
        _check_overflow(obs.Qmax)
        return np.stack([np.exp(obs.Q) * p.phi.fn(res.exit_point), res.exit_time], axis=1)

    values, censored = simulate_functionals(p, layout.interior_nodes, cfg.n_paths, sim, make,
                                            finish, workers=cfg.workers)
    warnings: list[str] = []
    _check_censoring(censored, sim, warnings)
    return values[:, :, 0].mean(axis=1), values[:, :, 1].mean(axis=1), warnings


def _lipschitz_y(driver: Driver, g: GridFunction, nodes: np.ndarray) -> float:
    """Largest -df/dy over the nodes at the current iterate (0 if f is increasing)."""
    if driver.is_zero:
        return 0.0
    y, z = HermiteSampler(g).sample(nodes)
    up = driver.f(nodes, y + SLOPE_STEP, z)
    dn = driver.f(nodes, y - SLOPE_STEP, z)
    slope = -(np.asarray(up) - np.asarray(dn)) / (2 * SLOPE_STEP)
    return float(max(0.0, np.max(np.abs(slope))))


def solve_semilinear(p: EllipticProblem, cfg: PicardConfig, raise_on_failure: bool = True):
    """Picard iteration from the gauged harmonic guess; returns (GridFunction, trace).

    Raises NoConvergence (trace attached) when max_iters is reached first.
    """
    layout = node_layout(p, cfg.dims)
    driver = problem_driver(p)
    trace = ConvergenceTrace()
    u0, tau, warnings = initial_guess(p, cfg, layout)
    trace.warnings += warnings
    trace.mean_exit_max = float(np.max(tau))
    u = layout.grid(u0)
    trace.lipschitz_y = _lipschitz_y(driver, u, layout.interior_nodes)
    if cfg.theta == "auto":
        theta = 2.0 / (2.0 + trace.lipschitz_y * trace.mean_exit_max)
    else:
        theta = float(cfg.theta)
    trace.theta = theta
    cur = u0
    se = np.zeros_like(u0)
    for _ in range(cfg.max_iters):
        new, se, n_cens, w = _sweep(p, driver, u, cfg, layout, _use_cv(cfg, driver))
        trace.warnings += w
        trace.n_censored = n_cens
        nxt = cur + theta * (new - cur)
        diff = float(np.max(np.abs(nxt - cur)))
        floor = 3.0 * float(np.max(se))
        trace.sup_diffs.append(diff)
        trace.noise_floors.append(floor)
        tol = cfg.tol_sup if cfg.tol_sup is not None else 2.0 * floor
        # a zero noise floor (deterministic data) must not demand an exact fixed point
        tol = max(tol, ROUNDOFF * (1.0 + float(np.max(np.abs(nxt)))))
        trace.tol = tol
        cur = nxt
        u = layout.grid(cur)
        log.info("picard iteration %d: sup diff %.3e (tol %.3e)", trace.iterations, diff, tol)
        if diff <= tol:
            trace.converged = True
            break
    trace.node_se = se
    sup = float(np.max(np.abs(u.values)))
    phi_sup = float(np.max(np.abs(layout.boundary_values[~layout.interior]))) if np.any(~layout.interior) else 0.0
    if not np.isfinite(sup):
        raise DriverBlowup("Picard iterate is not finite")
    trace.sup_norm = sup
    trace.sup_ratio = sup / (1.0 + phi_sup)
    if not trace.converged and raise_on_failure:
        raise NoConvergence(
            f"no convergence in {cfg.max_iters} Picard iterations "
            f"(last sup diff {trace.sup_diffs[-1]:.3e}, tol {trace.tol:.3e})", trace)
    return u, trace


def pathwise_bsde_residual(p: EllipticProblem, u: GridFunction, n_paths: int, cfg: SimConfig,
                           points=None, workers: int | None = None) -> McEstimate:
    """Discrete BSDE defect R = phi(X_tau) + sum f dt - sum <grad u, dM> - u(x0).

    ``points`` defaults to the interior grid nodes.  Paths with the same
    index share noise across start points, so the per-path average of R over
    the points is the independent sample; ``second_moment`` is the mean of
    R^2 over all (point, path) pairs.
    """
    driver = problem_driver(p)
    sampler = HermiteSampler(u)
    if points is None:
        pts = node_layout(p, u.dims).interior_nodes
    else:
        pts, _ = as_points(points, p.d)
    u0, _ = sampler.sample(pts)

    def make(m):
        return DriverObserver(m, driver, sampler, True, math.inf)

    def finish(obs, res):
        return p.phi.fn(res.exit_point) + obs.I - obs.M

    values, censored = simulate_functionals(p, pts, n_paths, cfg, make, finish, workers=workers)
    warnings: list[str] = []
    counts = _check_censoring(censored, cfg, warnings)
    R = values - u0[:, None]
    return McEstimate.from_samples(R.mean(axis=0), int(counts.sum()),
                                   second_moment=float(np.mean(R * R)), warnings=warnings)
