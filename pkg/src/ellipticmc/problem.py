"""Problem data: coefficient fields, drivers and the Dirichlet problem.

The operator is

    A u = 1/2 div(a grad u) + b . grad u - div(bhat u) + q u

and a problem asks for ``A u = -f(x, u, grad u)`` in D, ``u = phi`` on the
boundary.  In linear mode the right-hand side is a forcing field F with the
same sign convention, ``L u = -F`` (so F = 1 gives the mean exit time).

Fields are vectorized: they take points of shape (n, d) and return (n,),
(n, d) or (n, d, d).  Grid-backed fields use multilinear interpolation; the
coefficients of a real problem may be merely measurable, but simulating
against them is only meaningful for piecewise-smooth data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .domain import Domain
from .errors import (
    ConfigError,
    EllipticityViolation,
    GrowthViolation,
    LipschitzViolation,
    MonotonicityViolation,
    ValidationError,
)
from .grid import GridFunction, as_points

GRAD_CHECK_STEP = 1e-6
GRAD_CHECK_RTOL = 1e-5
DRIVER_ATOL = 1e-10


class ScalarField:
    """Deterministic scalar field with optional analytic gradient/Hessian."""

    def __init__(self, fn: Callable, d: int, grad: Callable | None = None,
                 hess: Callable | None = None, name: str = "", constant: float | None = None):
        self.fn = fn
        self.d = d
        self.grad = grad
        self.hess = hess
        self.name = name
        self.constant = constant

    @classmethod
    def const(cls, value: float, d: int) -> "ScalarField":
        value = float(value)
        return cls(
            lambda x: np.full(x.shape[0], value),
            d,
            grad=lambda x: np.zeros_like(x),
            hess=lambda x: np.zeros((x.shape[0], d, d)),
            name=f"constant:{value:g}",
            constant=value,
        )

    @classmethod
    def zero(cls, d: int) -> "ScalarField":
        return cls.const(0.0, d)

    @classmethod
    def from_grid(cls, g: GridFunction, name: str = "grid") -> "ScalarField":
        return cls(g, g.d, grad=g.gradient, name=name)

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0

    def __call__(self, x):
        pts, single = as_points(x, self.d)
        out = np.asarray(self.fn(pts), dtype=float).reshape(pts.shape[0])
        return float(out[0]) if single else out

    def gradient(self, x):
        pts, single = as_points(x, self.d)
        if self.grad is not None:
            out = np.asarray(self.grad(pts), dtype=float).reshape(pts.shape)
        else:
            out = central_gradient(self.fn, pts, GRAD_CHECK_STEP)
        return out[0] if single else out

    def __repr__(self):
        return f"ScalarField({self.name or self.fn!r})"


class VectorField:
    def __init__(self, fn: Callable, d: int, name: str = "", constant=None):
        self.fn = fn
        self.d = d
        self.name = name
        self.constant = None if constant is None else np.asarray(constant, dtype=float)

    @classmethod
    def const(cls, value, d: int) -> "VectorField":
        v = np.broadcast_to(np.asarray(value, dtype=float), (d,)).copy()
        return cls(lambda x: np.broadcast_to(v, x.shape).copy(), d,
                   name=f"constant:{v.tolist()}", constant=v)

    @classmethod
    def zero(cls, d: int) -> "VectorField":
        return cls.const(0.0, d)

    @property
    def is_zero(self) -> bool:
        return self.constant is not None and not np.any(self.constant)

    def __call__(self, x):
        pts, single = as_points(x, self.d)
        out = np.asarray(self.fn(pts), dtype=float).reshape(pts.shape)
        return out[0] if single else out

    def __repr__(self):
        return f"VectorField({self.name or self.fn!r})"


class MatrixField:
    """Symmetric matrix field; ``div`` returns the row divergence sum_j d_j a_ij."""

    def __init__(self, fn: Callable, d: int, div: Callable | None = None,
                 name: str = "", constant=None):
        self.fn = fn
        self.d = d
        self.div = div
        self.name = name
        self.constant = None if constant is None else np.asarray(constant, dtype=float)

    @classmethod
    def const(cls, value, d: int) -> "MatrixField":
        m = np.asarray(value, dtype=float)
        if m.ndim == 0:
            m = m * np.eye(d)
        elif m.ndim == 1:
            m = np.diag(m)
        m = m.reshape(d, d)
        return cls(lambda x: np.broadcast_to(m, (x.shape[0], d, d)).copy(), d,
                   div=lambda x: np.zeros((x.shape[0], d)),
                   name=f"constant:{m.tolist()}", constant=m)

    @classmethod
    def identity(cls, d: int) -> "MatrixField":
        f = cls.const(np.eye(d), d)
        f.name = "identity"
        return f

    def __call__(self, x):
        pts, single = as_points(x, self.d)
        out = np.asarray(self.fn(pts), dtype=float).reshape(pts.shape[0], self.d, self.d)
        return out[0] if single else out

    def row_divergence(self, x, step: float = 1e-5):
        """Analytic divergence when available, else central differences."""
        pts, single = as_points(x, self.d)
        if self.div is not None:
            out = np.asarray(self.div(pts), dtype=float).reshape(pts.shape)
        else:
            out = np.zeros(pts.shape)
            for j in range(self.d):
                e = np.zeros(self.d)
                e[j] = step
                out += (self.fn(pts + e)[:, :, j] - self.fn(pts - e)[:, :, j]) / (2 * step)
        return out[0] if single else out

    def __repr__(self):
        return f"MatrixField({self.name or self.fn!r})"


@dataclass(frozen=True, eq=False)
class Driver:
    """Nonlinearity f(x, y, z) with its structural constants.

    ``c1`` is the monotonicity field, (y1-y2)(f(y1)-f(y2)) <= -c1 |y1-y2|^2;
    ``c2`` the Lipschitz constant in z; ``growth`` the constant C in
    |f| <= C + C|q| (None: unchecked).
    """

    f: Callable
    c1: ScalarField
    c2: float = 0.0
    growth: float | None = None
    name: str = ""
    is_zero: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, d: int) -> "Driver":
        return cls(lambda x, y, z: np.zeros(y.shape[0]), ScalarField.zero(d),
                   0.0, 0.0, name="zero", is_zero=True)

    @classmethod
    def linear_decay(cls, d: int, rate: float = 1.0, source: ScalarField | None = None) -> "Driver":
        """f(x, y, z) = -rate * y + source(x)."""
        if source is None:
            return cls(lambda x, y, z: -rate * y, ScalarField.const(rate, d), 0.0,
                       name=f"linear:-{rate:g}y")
        return cls(lambda x, y, z: -rate * y + source.fn(x), ScalarField.const(rate, d), 0.0,
                   name=f"linear:-{rate:g}y+g(x)")

    def __call__(self, x, y, z) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.asarray(self.f(x, y, z), dtype=float).reshape(y.shape[0])


@dataclass(frozen=True, eq=False)
class EllipticProblem:
    domain: Domain
    a: MatrixField
    phi: ScalarField
    lam: float
    Lam: float
    b: VectorField | None = None
    bhat: VectorField | None = None
    q: ScalarField | None = None
    driver: Driver | None = None
    forcing: ScalarField | None = None
    mode: str = "linear"
    name: str = ""
    phi_modulus: float | None = None

    def __post_init__(self):
        d = self.domain.d
        if self.a.d != d:
            raise ConfigError("coefficient dimension does not match the domain")
        for attr, make in (("b", VectorField.zero), ("bhat", VectorField.zero),
                           ("q", ScalarField.zero), ("forcing", ScalarField.zero),
                           ("driver", Driver.zero)):
            if getattr(self, attr) is None:
                object.__setattr__(self, attr, make(d))
        if not (0 < self.lam <= self.Lam):
            raise ConfigError(f"need 0 < lambda <= Lambda, got {self.lam}, {self.Lam}")
        lo, hi = self.domain.bounding_box
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("domain must be bounded")
        if self.mode not in ("linear", "semilinear"):
            raise ConfigError(f"mode must be 'linear' or 'semilinear', got {self.mode!r}")

    @property
    def d(self) -> int:
        return self.domain.d

    def replace(self, **kw) -> "EllipticProblem":
        return replace(self, **kw)


def fold_q_into_driver(p: EllipticProblem) -> Driver:
    """Driver q(x) y + g(x, y, z) of the L1 problem equivalent to ``p``."""
    g = p.driver
    if p.q.is_zero:
        return g
    q = p.q

    def f(x, y, z):
        return q.fn(x) * y + g.f(x, y, z)

    c1 = ScalarField(lambda x: g.c1.fn(x) - q.fn(x), p.d, name=f"({g.c1.name})-q")
    meta = dict(g.meta, folded_q=True, base_c1=g.c1)
    return Driver(f, c1, g.c2, g.growth, name=f"q*y+{g.name}", meta=meta)


# -- validation -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    witness: np.ndarray | None = None
    detail: str = ""
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "skipped": self.skipped,
            "worst_margin": self.worst_margin,
            "witness": None if self.witness is None else self.witness.tolist(),
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    checks: list[CheckResult]
    n_samples: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "n_samples": self.n_samples, "seed": self.seed,
                "checks": [c.to_dict() for c in self.checks]}


CHECK_ERRORS = {
    "symmetry": EllipticityViolation,
    "ellipticity": EllipticityViolation,
    "monotonicity": MonotonicityViolation,
    "lipschitz_z": LipschitzViolation,
    "growth": GrowthViolation,
}


def sample_interior(domain: Domain, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points of the bounding box that fall inside the domain."""
    lo, hi = domain.bounding_box
    out = []
    have = 0
    for _ in range(1000):
        pts = rng.uniform(lo, hi, size=(max(2 * n, 16), domain.d))
        pts = pts[domain.contains(pts)]
        out.append(pts)
        have += pts.shape[0]
        if have >= n:
            break
    pts = np.concatenate(out)[:n]
    if pts.shape[0] < n:
        raise ConfigError("could not sample interior points of the domain")
    return pts


def validate_problem(p: EllipticProblem, n_samples: int = 256, rng_seed: int = 0,
                     strict: bool = True, y_scale: float = 2.0,
                     z_scale: float = 1.0) -> ValidationReport:
    """Check ellipticity, symmetry and driver conditions at sampled points.

    With ``strict`` the first failing check is raised as its error class
    (carrying the witnessing point and the report); otherwise the report is
    returned with failures marked.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    x = sample_interior(p.domain, n_samples, rng)
    d = p.d
    checks: list[CheckResult] = []

    A = p.a(x)
    asym = np.max(np.abs(A - np.transpose(A, (0, 2, 1))), axis=(1, 2))
    k = int(np.argmax(asym))
    checks.append(CheckResult("symmetry", bool(asym[k] <= 1e-14), float(1e-14 - asym[k]), x[k]))

    eig = np.linalg.eigvalsh(0.5 * (A + np.transpose(A, (0, 2, 1))))
    # random unit directions as well, as the contract asks; eigenvalues bound them
    xi = rng.standard_normal((n_samples, d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    quad = np.einsum("ni,nij,nj->n", xi, A, xi)
    lo_margin = np.minimum(eig[:, 0] - p.lam, quad - p.lam)
    hi_margin = np.minimum(p.Lam - eig[:, -1], p.Lam - quad)
    margin = np.minimum(lo_margin, hi_margin)
    k = int(np.argmin(margin))
    tol = 1e-12 * max(1.0, p.Lam)
    checks.append(CheckResult("ellipticity", bool(margin[k] >= -tol), float(margin[k]), x[k],
                              f"eigenvalues in [{eig[:, 0].min():.6g}, {eig[:, -1].max():.6g}]"
                              f" vs declared [{p.lam:g}, {p.Lam:g}]"))

    if p.a.div is not None:
        fd = MatrixField(p.a.fn, d).row_divergence(x)
        an = p.a.row_divergence(x)
        err = np.max(np.abs(an - fd) / (1.0 + np.abs(fd)), axis=1)
        k = int(np.argmax(err))
        checks.append(CheckResult("divergence", bool(err[k] <= 1e-5), float(1e-5 - err[k]), x[k]))

    for label, fld in (("phi", p.phi), ("q", p.q), ("forcing", p.forcing)):
        if fld.grad is None or fld.constant is not None:
            continue
        an = fld.gradient(x)
        fd = central_gradient(fld.fn, x, GRAD_CHECK_STEP)
        err = np.max(np.abs(an - fd), axis=1) / np.maximum(1.0, np.max(np.abs(fd), axis=1))
        k = int(np.argmax(err))
        checks.append(CheckResult(f"gradient:{label}", bool(err[k] <= GRAD_CHECK_RTOL),
                                  float(GRAD_CHECK_RTOL - err[k]), x[k]))

    drv = p.driver
    if not drv.is_zero:
        y1 = rng.uniform(-y_scale, y_scale, n_samples)
        y2 = rng.uniform(-y_scale, y_scale, n_samples)
        z1 = z_scale * rng.standard_normal((n_samples, d))
        z2 = z_scale * rng.standard_normal((n_samples, d))
        dy = y1 - y2
        lhs = dy * (drv(x, y1, z1) - drv(x, y2, z1))
        rhs = -drv.c1(x) * dy * dy
        margin = rhs + DRIVER_ATOL - lhs
        k = int(np.argmin(margin))
        checks.append(CheckResult("monotonicity", bool(margin[k] >= 0), float(margin[k]), x[k],
                                  f"y1={y1[k]:.6g}, y2={y2[k]:.6g}"))

        dz = np.linalg.norm(z1 - z2, axis=1)
        gap = np.abs(drv(x, y1, z1) - drv(x, y1, z2))
        margin = drv.c2 * dz + DRIVER_ATOL - gap
        k = int(np.argmin(margin))
        checks.append(CheckResult("lipschitz_z", bool(margin[k] >= 0), float(margin[k]), x[k]))

        if drv.growth is not None:
            val = np.abs(drv(x, y1, z1))
            margin = drv.growth * (1.0 + np.abs(p.q(x))) + DRIVER_ATOL - val
            k = int(np.argmin(margin))
            checks.append(CheckResult("growth", bool(margin[k] >= 0), float(margin[k]), x[k]))
        else:
            checks.append(CheckResult("growth", True, float("inf"), skipped=True,
                                      detail="no growth constant declared"))

    if p.phi_modulus is not None:
        checks.append(_boundary_continuity(p, x, rng))

    report = ValidationReport(checks, n_samples, rng_seed)
    if strict:
        for c in report.failures():
            err = CHECK_ERRORS.get(c.name, ValidationError)(
                f"{c.name} check failed (worst margin {c.worst_margin:.3g}) at {c.witness}"
                + (f"; {c.detail}" if c.detail else ""),
                point=c.witness, margin=c.worst_margin)
            err.report = report
            raise err
    return report


def _boundary_continuity(p: EllipticProblem, x, rng) -> CheckResult:
    eps = 1e-3 * float(np.max(np.subtract(*p.domain.bounding_box[::-1])))
    b1 = p.domain.closest_boundary_point(x)
    b2 = p.domain.closest_boundary_point(b1 + eps * rng.standard_normal(b1.shape))
    dist = np.linalg.norm(b1 - b2, axis=1)
    gap = np.abs(p.phi(b1) - p.phi(b2))
    margin = p.phi_modulus * dist + DRIVER_ATOL - gap
    k = int(np.argmin(margin))
    return CheckResult("boundary_continuity", bool(margin[k] >= 0), float(margin[k]), b1[k])


def central_gradient(fn: Callable, pts: np.ndarray, step: float) -> np.ndarray:
    out = np.empty_like(pts)
    for k in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[k] = step
        out[:, k] = (np.asarray(fn(pts + e)) - np.asarray(fn(pts - e))) / (2 * step)
    return out
