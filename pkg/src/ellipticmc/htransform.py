"""Removing the distributional drift -div(bhat u) by a gauge transform.

Let v solve div(a grad v) = -2 div(bhat) in a box B_R containing D, with
v = 0 on the boundary of B_R, and put h = exp(v).  Then û = h u solves

    1/2 div(a grad û) + <b - bhat - a grad v, grad û> + q̂ û = -f̂(x, û, grad û)

with q̂ = q - <b - bhat, grad v> + 1/2 grad v^T a grad v and
f̂(x, y, z) = h f(x, y / h, (z - y grad v) / h), boundary data h phi.  The
transformed operator has no distributional term, so it can be simulated;
u = û / h at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .bsde import ConvergenceTrace, PicardConfig, node_layout, solve_semilinear
from .domain import Box
from .errors import ConfigError, EllipticMCError, GaugeOverflow, SolverStall, StageError
from .feynman_kac import McEstimate, estimate_gauge
from .grid import GridFunction
from .oracle import fd_assemble
from .problem import Driver, EllipticProblem, MatrixField, ScalarField, VectorField
from .sde import SimConfig

AUX_MARGIN = 0.1
CG_RTOL = 1e-10


def auxiliary_box(p: EllipticProblem) -> Box:
    """Bounding box of D inflated by 10% of its width on every side."""
    lo, hi = p.domain.bounding_box
    pad = AUX_MARGIN * (hi - lo)
    return Box(lo - pad, hi + pad)


def face_divergence(bhat: VectorField, nodes: np.ndarray, h: np.ndarray) -> np.ndarray:
    """sum_k (bhat_k(x + h_k/2) - bhat_k(x - h_k/2)) / h_k: the flux form of div bhat."""
    d = nodes.shape[1]
    out = np.zeros(nodes.shape[0])
    for k in range(d):
        e = np.zeros(d)
        e[k] = 0.5 * h[k]
        out += (bhat.fn(nodes + e)[:, k] - bhat.fn(nodes - e)[:, k]) / h[k]
    return out


def solve_auxiliary_v(a: MatrixField, bhat: VectorField, B_R: Box, dims) -> GridFunction:
    """div(a grad v) = -2 div(bhat) in B_R, v = 0 on its boundary.

    The right-hand side only uses bhat at cell faces, never its
    derivatives.  The SPD system -1/2 div_h(a grad_h) v = div_h(bhat) is
    solved by conjugate gradients to relative residual 1e-10.
    """
    dims = tuple(int(n) for n in dims)
    d = B_R.d
    if bhat.is_zero:
        return GridFunction(B_R.lo, B_R.hi, np.zeros(dims))
    aux = EllipticProblem(B_R, a, ScalarField.zero(d), 1.0, 1.0, name="aux")
    sys = fd_assemble(aux, dims)
    K_ii, _ = sys.split(sys.K2)
    M = (-K_ii).tocsr()
    rhs = face_divergence(bhat, sys.unknown_nodes, sys.spacing)
    diag = M.diagonal()
    pre = spla.LinearOperator(M.shape, lambda r: r / diag)
    v, info = spla.cg(M, rhs, rtol=CG_RTOL * 1e-2, atol=0.0, maxiter=20 * M.shape[0], M=pre)
    resid = np.linalg.norm(M @ v - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(resid) or resid > CG_RTOL:
        raise SolverStall(f"auxiliary CG stalled at relative residual {resid:.2e}")
    vals = np.zeros(sys.nodes.shape[0])
    vals[sys.unknown] = v
    return GridFunction(B_R.lo, B_R.hi, vals.reshape(dims))


def gradient_grid(v: GridFunction) -> GridFunction:
    """Nodal grad v as the average of the two adjacent face differences."""
    return GridFunction(v.lo, v.hi, v.nodal_gradient)


@dataclass(frozen=True, eq=False)
class HTransformData:
    v: GridFunction
    grad_v: GridFunction
    transformed: EllipticProblem
    original: EllipticProblem
    identity: bool = False

    def h(self, x) -> np.ndarray:
        return np.exp(self.v(x))

    @property
    def h_min(self) -> float:
        return float(np.exp(-np.max(np.abs(self.v.values))))


def build_transform(p: EllipticProblem, v: GridFunction) -> HTransformData:
    """Assemble the transformed problem for the auxiliary potential v."""
    d = p.d
    if p.bhat.is_zero and not np.any(v.values):
        return HTransformData(v, GridFunction(v.lo, v.hi, np.zeros(v.dims + (d,))), p, p, identity=True)
    gv = gradient_grid(v)
    a, b, bhat, q = p.a, p.b, p.bhat, p.q

    def grad(x):
        return gv(x)

    def hfun(x):
        return np.exp(v(x))

    def drift(x):
        A = np.asarray(a.fn(x), dtype=float).reshape(x.shape[0], d, d)
        return b.fn(x) - bhat.fn(x) - np.einsum("nij,nj->ni", A, grad(x))

    def potential(x):
        g = grad(x)
        A = np.asarray(a.fn(x), dtype=float).reshape(x.shape[0], d, d)
        cross = np.einsum("ni,ni->n", b.fn(x) - bhat.fn(x), g)
        quad = np.einsum("ni,nij,nj->n", g, A, g)
        return q.fn(x) - cross + 0.5 * quad

    f = p.driver
    if f.is_zero:
        fhat = f
    else:
        def fh(x, y, z):
            hx = hfun(x)
            zz = (z - y[:, None] * grad(x)) / hx[:, None]
            return hx * f.f(x, y / hx, zz)

        # y-differences scale by h and the quadratic form by h^2, so the
        # monotonicity field carries over when f does not depend on z
        fhat = Driver(fh, f.c1, f.c2, None, name=f"hat({f.name})", meta=dict(f.meta, transformed=True))
    F = p.forcing
    Fhat = F if F.is_zero else ScalarField(lambda x: hfun(x) * F.fn(x), d, name=f"h*{F.name}")
    phi = p.phi
    phihat = ScalarField(lambda x: hfun(x) * phi.fn(x), d, name=f"h*{phi.name}")
    tp = EllipticProblem(
        domain=p.domain, a=a, phi=phihat, lam=p.lam, Lam=p.Lam,
        b=VectorField(drift, d, name="b-bhat-a grad v"),
        bhat=VectorField.zero(d),
        q=ScalarField(potential, d, name="q-<b-bhat,grad v>+|grad v|_a^2/2"),
        driver=fhat, forcing=Fhat, mode=p.mode, name=f"hat({p.name})",
    )
    return HTransformData(v, gv, tp, p)


def prepare_transform(p: EllipticProblem, aux_dims) -> HTransformData:
    B_R = auxiliary_box(p)
    v = solve_auxiliary_v(p.a, p.bhat, B_R, aux_dims)
    return build_transform(p, v)


def solve_general(p: EllipticProblem, aux_dims, cfg: PicardConfig):
    """Auxiliary solve, transform, Picard solve of the transformed problem, u = û / h.

    Returns ``(GridFunction, ConvergenceTrace, HTransformData)``; errors are
    wrapped in StageError naming the failing stage.
    """
    try:
        B_R = auxiliary_box(p)
        v = solve_auxiliary_v(p.a, p.bhat, B_R, aux_dims)
    except EllipticMCError as exc:
        raise StageError("auxiliary", exc) from exc
    try:
        data = build_transform(p, v)
    except EllipticMCError as exc:
        raise StageError("transform", exc) from exc
    try:
        uhat, trace = solve_semilinear(data.transformed, cfg)
    except EllipticMCError as exc:
        raise StageError("semilinear", exc) from exc
    if data.identity:
        return uhat, trace, data
    layout = node_layout(p, cfg.dims)
    vals = uhat.values.reshape(-1) * np.exp(-v(layout.nodes))
    vals[~layout.interior] = layout.boundary_values[~layout.interior]
    return GridFunction(uhat.lo, uhat.hi, vals.reshape(uhat.dims)), trace, data


def check_gauge_condition(data: HTransformData, x, delta: float, n_paths: int, cfg: SimConfig,
                       J1: ScalarField | None = None, k2: float | None = None) -> McEstimate:
    """Gauge E_x[exp(int (q̂ - 2 J1 + delta c2^2) ds)] under the transformed diffusion.

    q̂ = q - <b - bhat, grad v> + 1/2 grad v^T a grad v is already the
    potential of the transformed problem, so only -2 J1 + delta c2^2 is
    passed as ``extra``; adding q̂ again would count it twice.  J1 defaults
    to the driver's monotonicity field and c2 to its z-Lipschitz constant.
    """
    p = data.transformed
    if not delta > 1.0 / p.lam:
        raise ConfigError(f"delta must exceed 1/lambda = {1.0 / p.lam:g}")
    J1 = data.original.driver.c1 if J1 is None else J1
    c2 = data.original.driver.c2 if k2 is None else k2
    if J1.is_zero and c2 == 0.0:
        extra = None
    else:
        extra = ScalarField(lambda y: -2.0 * J1.fn(y) + delta * c2 * c2, p.d, name="-2J1+delta c2^2")
    try:
        return estimate_gauge(p, x, extra, n_paths, cfg)
    except GaugeOverflow as exc:
        raise GaugeOverflow(f"{exc}; the gauge condition of the transformed problem is numerically violated",
                            exc.max_exponent) from exc


# alternative name for the same check
check_condition_40 = check_gauge_condition


def default_delta(p: EllipticProblem) -> float:
    return 1.01 / p.lam


def transform_trace_summary(trace: ConvergenceTrace, data: HTransformData) -> dict:
    return {
        "identity": data.identity,
        "v_sup": float(np.max(np.abs(data.v.values))),
        "h_min": data.h_min,
        "picard_iterations": trace.iterations,
    }
