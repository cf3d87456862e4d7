"""Finite-difference reference solver for the full divergence-form operator.

    A u = 1/2 div(a grad u) + b . grad u - div(bhat u) + q u

on the nodes of a regular grid over the bounding box of D.  Nodes inside D
are unknowns; every other node carries phi at its closest boundary point
(a first-order staircase on curved boundaries).

* 1/2 div(a grad u): conservative.  Diagonal entries of a are taken at the
  cell faces; a mixed term a_kl is differenced as
  d_k(a_kl d_l u) + d_l(a_lk d_k u) with a at the neighbouring nodes, which
  keeps the matrix symmetric and its rows summing to zero.
* b . grad u: first-order upwind (central on request).
* -div(bhat u): face fluxes bhat(face) * (u_left + u_right) / 2, so a
  constant flux telescopes to zero.

The linear problem is A u = -F, the semilinear one A u = -g(x, u, grad u).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GridTooCoarse, NewtonDiverged, SolverStall
from .grid import GridFunction, grid_nodes
from .problem import Driver, EllipticProblem, ScalarField

MIN_INTERIOR = 8
DIRECT_LIMIT = 40_000
RESIDUAL_TOL = 1e-10


@dataclass
class FdSystem:
    """Assembled stencil restricted to the unknown rows.

    ``K`` maps values on all nodes to A_h u at the unknown nodes; ``K2`` is
    its second-order part alone and ``D[k]`` the central-difference
    derivative along axis k (same shape), used for the gradient slot of a
    driver.
    """

    lo: np.ndarray
    hi: np.ndarray
    dims: tuple[int, ...]
    nodes: np.ndarray
    unknown: np.ndarray
    boundary_values: np.ndarray
    K: sp.csr_matrix
    K2: sp.csr_matrix
    D: list[sp.csr_matrix]
    problem: EllipticProblem

    @property
    def n_unknown(self) -> int:
        return int(self.unknown.sum())

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.dims) - 1)

    @property
    def unknown_nodes(self) -> np.ndarray:
        return self.nodes[self.unknown]

    def split(self, K: sp.csr_matrix | None = None):
        K = self.K if K is None else K
        K = K.tocsc()
        return K[:, self.unknown].tocsr(), K[:, ~self.unknown].tocsr()

    def apply(self, u_all) -> np.ndarray:
        """A_h u at the unknown nodes for nodal values ``u_all`` (all nodes)."""
        return self.K @ np.asarray(u_all, dtype=float).reshape(-1)

    def full(self, u_unknown, boundary=None) -> np.ndarray:
        out = (self.boundary_values if boundary is None else boundary).copy()
        out[self.unknown] = u_unknown
        return out

    def grid(self, u_all) -> GridFunction:
        return GridFunction(self.lo, self.hi, np.asarray(u_all).reshape(self.dims))


def _strides(dims) -> np.ndarray:
    return np.array([int(np.prod(dims[k + 1:])) for k in range(len(dims))], dtype=np.int64)


def fd_assemble(p: EllipticProblem, dims, upwind: bool = True) -> FdSystem:
    d = p.d
    dims = tuple(int(n) for n in dims)
    lo, hi = p.domain.bounding_box
    h = (hi - lo) / (np.asarray(dims) - 1)
    nodes = grid_nodes(lo, hi, dims)
    N = nodes.shape[0]
    unknown = np.asarray(p.domain.contains(nodes), dtype=bool)
    for k in range(d):
        count = np.unique(np.round(nodes[unknown, k] / h[k])).size if np.any(unknown) else 0
        if count < MIN_INTERIOR:
            raise GridTooCoarse(f"only {count} interior nodes along axis {k}; need {MIN_INTERIOR}")
    strides = _strides(dims)
    rows_flat = np.flatnonzero(unknown)
    multi = np.stack(np.unravel_index(rows_flat, dims), axis=1)
    if np.any(multi == 0) or np.any(multi == np.asarray(dims) - 1):
        raise GridTooCoarse("an interior node sits on the grid box; enlarge the grid box")
    n = rows_flat.size
    rid = np.arange(n)
    x = nodes[rows_flat]

    R2, C2, V2 = [], [], []     # second-order part
    R1, C1, V1 = [], [], []     # lower-order part

    def add(Rl, Cl, Vl, cols, vals):
        Rl.append(rid)
        Cl.append(cols)
        Vl.append(np.broadcast_to(vals, (n,)).astype(float))

    def a_entry(pts, i, j):
        return np.asarray(p.a.fn(pts), dtype=float).reshape(pts.shape[0], d, d)[:, i, j]

    for k in range(d):
        e = np.zeros(d)
        e[k] = h[k]
        ap = a_entry(x + 0.5 * e, k, k)
        am = a_entry(x - 0.5 * e, k, k)
        add(R2, C2, V2, rows_flat + strides[k], 0.5 * ap / h[k] ** 2)
        add(R2, C2, V2, rows_flat - strides[k], 0.5 * am / h[k] ** 2)
        add(R2, C2, V2, rows_flat, -0.5 * (ap + am) / h[k] ** 2)
    for k, l in itertools.combinations(range(d), 2):
        ek = np.zeros(d)
        ek[k] = h[k]
        el = np.zeros(d)
        el[l] = h[l]
        s = 0.5 / (4.0 * h[k] * h[l])
        a_pk = a_entry(x + ek, k, l)
        a_mk = a_entry(x - ek, k, l)
        a_pl = a_entry(x + el, k, l)
        a_ml = a_entry(x - el, k, l)
        sk, sl = strides[k], strides[l]
        add(R2, C2, V2, rows_flat + sk + sl, s * (a_pk + a_pl))
        add(R2, C2, V2, rows_flat - sk - sl, s * (a_mk + a_ml))
        add(R2, C2, V2, rows_flat + sk - sl, -s * (a_pk + a_ml))
        add(R2, C2, V2, rows_flat - sk + sl, -s * (a_mk + a_pl))

    if not p.b.is_zero:
        bv = np.asarray(p.b.fn(x), dtype=float).reshape(n, d)
        for k in range(d):
            bk = bv[:, k]
            if upwind:
                pos = np.maximum(bk, 0.0) / h[k]
                neg = np.minimum(bk, 0.0) / h[k]
                add(R1, C1, V1, rows_flat + strides[k], pos)
                add(R1, C1, V1, rows_flat - strides[k], -neg)
                add(R1, C1, V1, rows_flat, neg - pos)
            else:
                add(R1, C1, V1, rows_flat + strides[k], bk / (2 * h[k]))
                add(R1, C1, V1, rows_flat - strides[k], -bk / (2 * h[k]))
    if not p.bhat.is_zero:
        for k in range(d):
            e = np.zeros(d)
            e[k] = h[k]
            fp = np.asarray(p.bhat.fn(x + 0.5 * e), dtype=float).reshape(n, d)[:, k]
            fm = np.asarray(p.bhat.fn(x - 0.5 * e), dtype=float).reshape(n, d)[:, k]
            # -(F_{+} - F_{-}) / h with F_{+} = bhat(+) (u + u_{+k}) / 2
            add(R1, C1, V1, rows_flat + strides[k], -0.5 * fp / h[k])
            add(R1, C1, V1, rows_flat - strides[k], 0.5 * fm / h[k])
            add(R1, C1, V1, rows_flat, -0.5 * (fp - fm) / h[k])
    if not p.q.is_zero:
        add(R1, C1, V1, rows_flat, p.q.fn(x))

    def build(R, C, V):
        if not R:
            return sp.csr_matrix((n, N))
        return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))), shape=(n, N))

    K2 = build(R2, C2, V2)
    K = (K2 + build(R1, C1, V1)).tocsr()
    D = []
    for k in range(d):
        D.append(sp.csr_matrix(
            (np.concatenate([np.full(n, 0.5 / h[k]), np.full(n, -0.5 / h[k])]),
             (np.concatenate([rid, rid]), np.concatenate([rows_flat + strides[k], rows_flat - strides[k]]))),
            shape=(n, N)))
    bvals = np.zeros(N)
    known = ~unknown
    if np.any(known):
        bvals[known] = p.phi(p.domain.closest_boundary_point(nodes[known]))
    return FdSystem(lo, hi, dims, nodes, unknown, bvals, K, K2, D, p)


def _solve_sparse(M: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    if M.shape[0] <= DIRECT_LIMIT:
        sol = spla.spsolve(M.tocsc(), rhs)
    else:
        diag = M.diagonal()
        pre = spla.LinearOperator(M.shape, lambda v: v / diag)
        sol, info = spla.gmres(M, rhs, M=pre, rtol=RESIDUAL_TOL * 1e-2, restart=200, maxiter=2000)
    nrm = max(np.linalg.norm(rhs), 1e-300)
    resid = np.linalg.norm(M @ sol - rhs) / nrm
    if not np.all(np.isfinite(sol)) or resid > RESIDUAL_TOL:
        raise SolverStall(f"linear solve stalled at relative residual {resid:.2e}")
    return sol


def fd_solve_linear(sys: FdSystem, F: ScalarField | None = None, phi: ScalarField | None = None) -> GridFunction:
    """Solve A_h u = -F with u = phi on the known nodes."""
    boundary = sys.boundary_values
    if phi is not None:
        boundary = boundary.copy()
        known = ~sys.unknown
        boundary[known] = phi(sys.problem.domain.closest_boundary_point(sys.nodes[known]))
    K_ii, K_ib = sys.split()
    rhs = -K_ib @ boundary[~sys.unknown]
    if F is not None and not F.is_zero:
        rhs = rhs - F(sys.unknown_nodes)
    u = _solve_sparse(K_ii, rhs)
    return sys.grid(sys.full(u, boundary))


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-9
    max_iters: int = 50
    max_halvings: int = 40
    fd_step: float = 1e-6


@dataclass
class NewtonTrace:
    residuals: list[float] = field(default_factory=list)
    halvings: list[int] = field(default_factory=list)


def fd_solve_semilinear(sys: FdSystem, driver: Driver, phi: ScalarField | None = None,
                        newton_cfg: NewtonConfig | None = None, u0: GridFunction | None = None):
    """Damped Newton for A_h u + g(x, u, D u) = 0 at the unknown nodes.

    The driver Jacobian in the y and z slots is taken by central
    differences.  Returns ``(GridFunction, NewtonTrace)``.
    """
    cfg = newton_cfg or NewtonConfig()
    d = sys.problem.d
    boundary = sys.boundary_values
    if phi is not None:
        boundary = boundary.copy()
        known = ~sys.unknown
        boundary[known] = phi(sys.problem.domain.closest_boundary_point(sys.nodes[known]))
    x = sys.unknown_nodes
    K_ii, _ = sys.split()
    D_ii = [sys.split(Dk)[0] for Dk in sys.D]
    if u0 is None:
        u = fd_solve_linear(sys, None, phi).values.reshape(-1)[sys.unknown]
    else:
        u = np.asarray(u0.values, dtype=float).reshape(-1)[sys.unknown]

    def residual(uu):
        full = sys.full(uu, boundary)
        z = np.stack([Dk @ full for Dk in sys.D], axis=1)
        return sys.K @ full + driver(x, uu, z), full, z

    trace = NewtonTrace()
    G, full, z = residual(u)
    res = float(np.max(np.abs(G)))
    trace.residuals.append(res)
    for _ in range(cfg.max_iters):
        if res <= cfg.tol:
            return sys.grid(full), trace
        eps = cfg.fd_step * (1.0 + np.abs(u))
        gy = (driver(x, u + eps, z) - driver(x, u - eps, z)) / (2 * eps)
        J = K_ii + sp.diags(gy)
        if not driver.is_zero:
            for k in range(d):
                ez = np.zeros_like(z)
                ez[:, k] = cfg.fd_step * (1.0 + np.abs(z[:, k]))
                gz = (driver(x, u, z + ez) - driver(x, u, z - ez)) / (2 * ez[:, k])
                if np.any(gz):
                    J = J + sp.diags(gz) @ D_ii[k]
        step = _solve_sparse(J.tocsr(), -G)
        t = 1.0
        for halving in range(cfg.max_halvings + 1):
            G_new, full_new, z_new = residual(u + t * step)
            res_new = float(np.max(np.abs(G_new)))
            if np.isfinite(res_new) and res_new < res:
                break
            t *= 0.5
        else:
            raise NewtonDiverged(f"no decrease after {cfg.max_halvings} step halvings "
                                 f"(residual {res:.3e})", trace)
        trace.halvings.append(halving)
        u = u + t * step
        G, full, z, res = G_new, full_new, z_new, res_new
        trace.residuals.append(res)
    if res <= cfg.tol:
        return sys.grid(full), trace
    raise NewtonDiverged(f"Newton stopped at residual {res:.3e} after {cfg.max_iters} iterations", trace)
