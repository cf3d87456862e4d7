"""Euler-Maruyama simulation of the L1-diffusion up to its first exit time.

The generator 1/2 div(a grad) + b.grad is put in Ito form by adding half the
row divergence of ``a`` to the drift.  Each step is

    X_{k+1} = X_k + drift(X_k) dt + dM_k,   dM_k = sigma(X_k) sqrt(dt) xi_k,

with sigma the Cholesky factor of a.  The first exterior point is projected
back onto the boundary along the step; optionally, a half-space
Brownian-bridge test catches excursions that leave and re-enter D within a
step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NotSPD
from .grid import as_points
from .problem import EllipticProblem
from .rng import CHUNK, NoiseStreams, path_generator

SPD_PIVOT_FLOOR = 1e-8


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_max: float = 50.0
    bridge_correction: bool = True
    div_step: float = 1e-5
    seed: int = 0
    censor_limit: float = 1e-3

    def __post_init__(self):
        if not (self.dt > 0 and self.t_max > 0 and self.dt <= self.t_max):
            raise ConfigError("need 0 < dt <= t_max")
        if not self.div_step > 0:
            raise ConfigError("div_step must be positive")

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt - 1e-9))


@dataclass
class PathSample:
    """One trajectory.

    ``states[exit_index]`` is the first Euler state flagged as exited (for
    a bridge exit it is the interior end of the step where the crossing was
    detected); ``times[exit_index]`` is the refined exit time.
    """

    times: np.ndarray
    states: np.ndarray
    mart_increments: np.ndarray
    dt: float
    exited: bool
    exit_index: int
    exit_point: np.ndarray
    exit_time: float
    bridge_exit: bool = False

    @property
    def step_weights(self) -> np.ndarray:
        """Quadrature weights t_{k+1} - t_k of the recorded steps."""
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return self.mart_increments.shape[0]


def diffusion_factor(a_val, lam: float | None = None) -> np.ndarray:
    """Lower-triangular sigma with sigma sigma^T = a."""
    a_val = np.asarray(a_val, dtype=float)
    single = a_val.ndim == 2
    L = _cholesky(a_val[None] if single else a_val, lam, None)
    return L[0] if single else L


def _cholesky(A: np.ndarray, lam: float | None, pts) -> np.ndarray:
    floor = SPD_PIVOT_FLOOR * (lam if lam is not None else 1.0)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(A)[:, 0]
        k = int(np.argmin(eig))
        raise NotSPD(f"matrix is not positive definite (min eigenvalue {eig[k]:.3g})",
                     point=None if pts is None else pts[k], margin=float(eig[k])) from None
    piv = np.min(np.diagonal(L, axis1=1, axis2=2) ** 2, axis=1)
    if np.any(piv <= floor):
        k = int(np.argmin(piv))
        raise NotSPD(f"Cholesky pivot {piv[k]:.3g} below floor {floor:.3g}",
                     point=None if pts is None else pts[k], margin=float(piv[k]))
    return L


def effective_drift(p: EllipticProblem, x, div_step: float = 1e-5):
    """b(x) + 1/2 sum_j d_j a_ij(x): the Ito drift of the divergence-form generator."""
    pts, single = as_points(x, p.d)
    out = _Dynamics(p, div_step).drift(pts)
    return out[0] if single else out


class _Dynamics:
    """Coefficient evaluation with shortcuts for constant fields."""

    def __init__(self, p: EllipticProblem, div_step: float):
        self.p = p
        self.d = p.d
        self.div_step = div_step
        self.const_a = p.a.constant
        if self.const_a is not None:
            self.sigma = diffusion_factor(self.const_a, p.lam)
            self.lam_max_const = float(np.linalg.eigvalsh(self.const_a)[-1])

    def drift(self, x: np.ndarray) -> np.ndarray:
        p = self.p
        out = np.zeros_like(x) if p.b.is_zero else np.asarray(p.b.fn(x), dtype=float).reshape(x.shape)
        if self.const_a is None:
            out = out + 0.5 * p.a.row_divergence(x, self.div_step)
        return out

    def increments(self, x: np.ndarray, xi: np.ndarray, sqdt: float) -> np.ndarray:
        if self.const_a is not None:
            L = self.sigma
            return sqdt * _matvec_const(L, xi)
        A = np.asarray(self.p.a.fn(x), dtype=float).reshape(x.shape[0], self.d, self.d)
        L = _cholesky(A, self.p.lam, x)
        return sqdt * _matvec(L, xi)

    def lam_max(self, x: np.ndarray) -> np.ndarray:
        if self.const_a is not None:
            return np.full(x.shape[0], self.lam_max_const)
        A = np.asarray(self.p.a.fn(x), dtype=float).reshape(x.shape[0], self.d, self.d)
        if self.d == 1:
            return A[:, 0, 0]
        return np.linalg.eigvalsh(A)[:, -1]


# Small products are written out elementwise: BLAS kernels may change the
# rounding of a row with the batch size, which would break bit-reproducibility.
def _matvec_const(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = L.shape[0]
    out = np.empty_like(v)
    for i in range(d):
        acc = L[i, 0] * v[:, 0]
        for j in range(1, i + 1):
            acc = acc + L[i, j] * v[:, j]
        out[:, i] = acc
    return out


def _matvec(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = L.shape[1]
    out = np.empty_like(v)
    for i in range(d):
        acc = L[:, i, 0] * v[:, 0]
        for j in range(1, d):
            acc = acc + L[:, i, j] * v[:, j]
        out[:, i] = acc
    return out


@dataclass
class BatchExit:
    exit_point: np.ndarray
    exit_time: np.ndarray
    exited: np.ndarray
    bridge_exit: np.ndarray
    last_state: np.ndarray
    n_steps: np.ndarray

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(~self.exited))


def run_batch(p: EllipticProblem, x0: np.ndarray, streams: NoiseStreams,
              stream_of: np.ndarray, cfg: SimConfig, observers=()) -> BatchExit:
    """Advance every entry of ``x0`` until exit or t_max.

    Entry ``e`` uses noise stream ``stream_of[e]``.  After each step every
    observer gets ``step(ids, x, dt_k, dm)`` for the entries that were alive
    at the start of the step: their positions X_k, quadrature weights dt_k
    (the full dt, or the fraction up to the exit) and increments dM_k.
    """
    x0 = np.asarray(x0, dtype=float)
    m, d = x0.shape
    dom = p.domain
    dyn = _Dynamics(p, cfg.div_step)
    dt = cfg.dt
    sqdt = math.sqrt(dt)

    exit_point = x0.copy()
    exit_time = np.zeros(m)
    exited = np.zeros(m, dtype=bool)
    bridge_exit = np.zeros(m, dtype=bool)
    n_steps = np.zeros(m, dtype=np.int64)

    xa = x0.copy()
    sda = dom._sd(xa)
    if np.any(sda >= 0):
        k = int(np.argmax(sda >= 0))
        raise ConfigError(f"start point {x0[k]} is not inside the domain")
    ids = np.arange(m)
    sid = np.asarray(stream_of, dtype=np.int64)
    n_streams = len(streams.gens)

    for k in range(cfg.max_steps):
        if ids.size == 0:
            break
        r = k % CHUNK
        if r == 0:
            live = np.zeros(n_streams, dtype=bool)
            live[sid] = True
            streams.advance(k // CHUNK, live)
        xi, uni = streams.step_draws(r, sid)

        drift = dyn.drift(xa)
        dm = dyn.increments(xa, xi, sqdt)
        xn = xa + drift * dt + dm
        sdn = dom._sd(xn)
        out = sdn >= 0.0
        dtk = np.full(ids.size, dt)

        if np.any(out):
            pts, theta = dom.crossing(xa[out], xn[out])
            dtk[out] = theta * dt
            exit_point[ids[out]] = pts
        hit = np.zeros(ids.size, dtype=bool)
        if cfg.bridge_correction:
            inner = ~out
            mid = 0.5 * (xa[inner] + xn[inner])
            lam = dyn.lam_max(mid)
            prob = np.exp(-2.0 * sda[inner] * sdn[inner] / (lam * dt))
            hit[inner] = uni[inner] < prob
            if np.any(hit):
                dtk[hit] = 0.5 * dt
                exit_point[ids[hit]] = dom.closest_boundary_point(0.5 * (xa[hit] + xn[hit]))
                bridge_exit[ids[hit]] = True

        for obs in observers:
            obs.step(ids, xa, dtk, dm)

        gone = out | hit
        if np.any(gone):
            g = ids[gone]
            exited[g] = True
            exit_time[g] = k * dt + dtk[gone]
            n_steps[g] = k + 1
            keep = np.flatnonzero(~gone)
            ids, sid = ids.take(keep), sid.take(keep)
            xa, sda = xn.take(keep, axis=0), sdn.take(keep)
        else:
            xa, sda = xn, sdn

    if ids.size:
        exit_point[ids] = xa
        exit_time[ids] = cfg.max_steps * dt
        n_steps[ids] = cfg.max_steps
    last_state = exit_point.copy()
    if ids.size:
        last_state[ids] = xa
    return BatchExit(exit_point, exit_time, exited, bridge_exit, last_state, n_steps)


class _Recorder:
    def __init__(self):
        self.xs, self.dts, self.dms = [], [], []

    def step(self, ids, x, dtk, dm):
        self.xs.append(x[0].copy())
        self.dts.append(float(dtk[0]))
        self.dms.append(dm[0].copy())


class _GeneratorStreams(NoiseStreams):
    """NoiseStreams over caller-supplied generators (or stubs)."""

    def __init__(self, gens, d):
        self.path_ids = np.arange(len(gens))
        self.d = d
        self.gens = list(gens)
        self._alloc()


def simulate_path(p: EllipticProblem, x0, cfg: SimConfig, rng=None, path_index: int = 0) -> PathSample:
    """Simulate one path, recording states and martingale increments.

    ``rng`` is any object with ``standard_normal(out=...)``;
    by default the counter-based stream for ``(cfg.seed, path_index)``, which
    reproduces exactly the noise the batch solvers use for that path.
    """
    pts, _ = as_points(x0, p.d)
    if rng is None:
        rng = path_generator(cfg.seed, path_index)
    streams = _GeneratorStreams([rng], p.d)
    rec = _Recorder()
    res = run_batch(p, pts, streams, np.zeros(1, dtype=np.int64), cfg, observers=(rec,))
    n = len(rec.xs)
    if n == 0:
        states = pts.copy()
        dms = np.zeros((0, p.d))
    else:
        dms = np.array(rec.dms).reshape(n, p.d)
        states = np.vstack([np.array(rec.xs).reshape(n, p.d), np.zeros((1, p.d))])
        # final Euler state, rebuilt with the engine's own arithmetic
        dyn = _Dynamics(p, cfg.div_step)
        states[n] = states[n - 1] + dyn.drift(states[n - 1:n])[0] * cfg.dt + dms[n - 1]
    times = np.zeros(n + 1)
    times[1:n] = np.arange(1, n) * cfg.dt
    if n:
        times[n] = res.exit_time[0]
    exited = bool(res.exited[0])
    return PathSample(
        times=times,
        states=states,
        mart_increments=dms,
        dt=cfg.dt,
        exited=exited,
        exit_index=n if exited else -1,
        exit_point=res.exit_point[0] if exited else res.last_state[0],
        exit_time=float(res.exit_time[0]),
        bridge_exit=bool(res.bridge_exit[0]),
    )


def quadratic_variation_residual(path: PathSample, p: EllipticProblem) -> np.ndarray:
    """Realized bracket sum dM dM^T minus its compensator sum a(X_k) dt."""
    d = p.d
    n = path.n_steps
    if n == 0:
        return np.zeros((d, d))
    dm = path.mart_increments
    realized = dm.T @ dm
    A = p.a(path.states[:n])
    return realized - A.sum(axis=0) * path.dt


@dataclass
class QuadraticVariation:
    """Observer accumulating the per-entry bracket residual over a batch."""

    p: EllipticProblem
    m: int
    dt: float
    resid: np.ndarray = field(init=False)

    def __post_init__(self):
        self.resid = np.zeros((self.m, self.p.d, self.p.d))
        self._const = self.p.a.constant

    def step(self, ids, x, dtk, dm):
        A = self._const if self._const is not None else self.p.a.fn(x)
        self.resid[ids] += dm[:, :, None] * dm[:, None, :] - A * self.dt


def write_paths(fh, paths: list[PathSample]) -> None:
    """Binary dump: per path a header <II (d, n_records) then records of
    little-endian f64 (t, X_1..X_d, dM_1..dM_d); the final record has dM = 0."""
    for path in paths:
        n_rec, d = path.states.shape
        fh.write(struct.pack("<II", d, n_rec))
        dm = np.vstack([path.mart_increments, np.zeros((1, d))])
        rec = np.column_stack([path.times, path.states, dm]).astype("<f8")
        fh.write(rec.tobytes())


def read_paths(raw: bytes) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    out = []
    off = 0
    while off < len(raw):
        d, n_rec = struct.unpack_from("<II", raw, off)
        off += 8
        rec = np.frombuffer(raw, dtype="<f8", count=n_rec * (1 + 2 * d), offset=off)
        off += 8 * rec.size
        rec = rec.reshape(n_rec, 1 + 2 * d)
        out.append((rec[:, 0].copy(), rec[:, 1:1 + d].copy(), rec[:-1, 1 + d:].copy()))
    return out


MAX_BLOCK_ENTRIES = 1 << 15


def simulate_functionals(p: EllipticProblem, points, n_paths: int, cfg: SimConfig,
                         make_observer, finish, coarsen: int = 1, workers: int | None = None):
    """Run ``n_paths`` paths from every start point and reduce each path.

    Path ``j`` from every start point shares the noise stream ``j`` (common
    random numbers across points).  ``make_observer(m)`` builds the per-block
    accumulator and ``finish(observer, exit)`` turns it into per-entry
    values of shape (m,) or (m, k).  Returns ``(values, censored)`` with
    values of shape (n_points, n_paths[, k]) and a censored mask of shape
    (n_points, n_paths).  Results do not depend on the block split.
    """
    from .rng import path_blocks, run_blocks, worker_count

    pts, _ = as_points(points, p.d)
    n_pts = pts.shape[0]
    workers = worker_count() if workers is None else workers
    per_block = max(1, MAX_BLOCK_ENTRIES // max(1, n_pts))
    blocks = path_blocks(n_paths, workers, per_block)

    def one(a, b):
        nb = b - a
        streams = NoiseStreams(cfg.seed, np.arange(a, b), p.d, coarsen=coarsen)
        x0 = np.repeat(pts, nb, axis=0)
        stream_of = np.tile(np.arange(nb), n_pts)
        obs = make_observer(x0.shape[0])
        res = run_batch(p, x0, streams, stream_of, cfg, observers=(obs,) if obs is not None else ())
        vals = np.asarray(finish(obs, res))
        return vals.reshape((n_pts, nb) + vals.shape[1:]), (~res.exited).reshape(n_pts, nb)

    parts = run_blocks(one, blocks, workers)
    values = np.concatenate([v for v, _ in parts], axis=1)
    censored = np.concatenate([c for _, c in parts], axis=1)
    return values, censored
