"""Test problems with closed-form or finite-difference references.

Every reference is reproducible: closed forms are evaluated, FD references
are regenerated by the oracle on the grid pinned in the fixture.  Nothing
here is a frozen number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .domain import Ball, Box
from .errors import ConfigError
from .grid import GridFunction
from .oracle import fd_assemble, fd_solve_linear, fd_solve_semilinear
from .problem import Driver, EllipticProblem, MatrixField, ScalarField, VectorField

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Tolerance:
    """``kind`` is "statistical" (|err| <= max(n_se SE, abs, rel |ref|)) or "deterministic"."""

    kind: str
    n_se: float = 3.0
    abs: float = 0.0
    rel: float = 0.0

    def bound(self, ref, se=0.0):
        ref = np.abs(np.asarray(ref, dtype=float))
        return np.maximum(self.n_se * np.asarray(se), np.maximum(self.abs, self.rel * ref))


@dataclass(frozen=True)
class FdReference:
    """Reference computed by the FD oracle on a pinned grid."""

    dims: tuple[int, ...]

    def compute(self, p: EllipticProblem) -> GridFunction:
        return _fd_reference(p, self.dims)


@dataclass(frozen=True, eq=False)
class Fixture:
    name: str
    problem: EllipticProblem
    reference: ScalarField | FdReference
    tolerance: Tolerance
    description: str = ""
    settings: dict = field(default_factory=dict)

    @property
    def closed_form(self) -> bool:
        return isinstance(self.reference, ScalarField)

    def reference_field(self):
        """A callable on (n, d) points: the closed form or the FD grid."""
        if self.closed_form:
            return self.reference
        return self.reference.compute(self.problem)

    def reference_values(self, x) -> np.ndarray:
        return np.asarray(self.reference_field()(np.atleast_2d(np.asarray(x, dtype=float))))


_FD_CACHE: dict = {}


def _fd_reference(p: EllipticProblem, dims) -> GridFunction:
    key = (id(p), tuple(dims))
    if key not in _FD_CACHE:
        sys = fd_assemble(p, dims)
        if p.mode == "semilinear":
            g, _ = fd_solve_semilinear(sys, p.driver)
        else:
            g = fd_solve_linear(sys)
        _FD_CACHE[key] = (p, g)
    return _FD_CACHE[key][1]


# -- the individual problems ---------------------------------------------------


def _coord(k: int, d: int) -> ScalarField:
    def grad(x):
        g = np.zeros_like(x)
        g[:, k] = 1.0
        return g
    return ScalarField(lambda x: x[:, k].copy(), d, grad=grad, name=f"x{k + 1}")


def _unit_disk() -> Ball:
    return Ball(np.zeros(2), 1.0)


def harmonic_ball() -> Fixture:
    p = EllipticProblem(_unit_disk(), MatrixField.identity(2), _coord(0, 2), 1.0, 1.0,
                        name="harmonic-ball")
    pts = [[0.0, 0.0], [0.5, 0.0], [-0.3, 0.4], [0.0, -0.7], [0.6, 0.6]]
    return Fixture("harmonic-ball", p, _coord(0, 2), Tolerance("statistical", 3.0, abs=0.01),
                   "1/2 Laplace u = 0 in the unit disk, u = x1 on the circle",
                   {"points": pts, "n_paths": 100_000, "dt": 1e-3})


def mean_exit_ball(d: int = 2) -> Fixture:
    ref = ScalarField(lambda x: (1.0 - np.einsum("ij,ij->i", x, x)) / d, d,
                      grad=lambda x: -2.0 * x / d, name="(1-|x|^2)/d")
    p = EllipticProblem(Ball(np.zeros(d), 1.0), MatrixField.identity(d), ScalarField.zero(d),
                        1.0, 1.0, forcing=ScalarField.const(1.0, d), name="mean-exit-ball")
    return Fixture("mean-exit-ball", p, ref, Tolerance("statistical", 0.0, rel=0.02),
                   "E_x[tau] for Brownian motion in the unit ball",
                   {"points": [[0.0] * d], "n_paths": 100_000, "dt": 1e-3})


def _cosh_ref(rate: float = 1.0) -> ScalarField:
    k = math.sqrt(2.0 * rate)
    return ScalarField(lambda x: np.cosh(k * x[:, 0]) / math.cosh(k), 1,
                       grad=lambda x: (k * np.sinh(k * x[:, 0]) / math.cosh(k))[:, None],
                       name=f"cosh({k:g}x)/cosh({k:g})")


def _interval() -> Box:
    return Box(np.array([-1.0]), np.array([1.0]))


def cosh1d() -> Fixture:
    """1/2 u'' = u on (-1, 1), u(+-1) = 1, posed with the driver f = -y."""
    p = EllipticProblem(_interval(), MatrixField.identity(1), ScalarField.const(1.0, 1), 1.0, 1.0,
                        driver=Driver.linear_decay(1, 1.0), mode="semilinear", name="cosh1d")
    return Fixture("cosh1d", p, _cosh_ref(), Tolerance("statistical", 3.0, rel=0.02),
                   "semilinear form of 1/2 u'' = u with u(+-1) = 1",
                   {"dims": [21], "n_paths": 4000, "dt": 1e-3})


def gauged_decay() -> Fixture:
    """E_x[exp(-tau)] on (-1, 1): the potential q = -1 inside the operator."""
    p = EllipticProblem(_interval(), MatrixField.identity(1), ScalarField.const(1.0, 1), 1.0, 1.0,
                        q=ScalarField.const(-1.0, 1), name="gauged-decay")
    return Fixture("gauged-decay", p, _cosh_ref(), Tolerance("statistical", 3.0, rel=0.01),
                   "E_x[exp(-tau)] = cosh(sqrt2 x) / cosh(sqrt2)",
                   {"points": [[0.0]], "n_paths": 100_000, "dt": 1e-3})


def _cubic_driver(c1: float = 1.0) -> Driver:
    return Driver(lambda x, y, z: -y ** 3 - y, ScalarField.const(c1, 2), 0.0,
                  name="-y^3-y")


def disk_cubic() -> Fixture:
    p = EllipticProblem(_unit_disk(), MatrixField.identity(2), ScalarField.const(1.0, 2), 1.0, 1.0,
                        driver=_cubic_driver(), mode="semilinear", name="disk-cubic")
    return Fixture("disk-cubic", p, FdReference((129, 129)), Tolerance("deterministic", rel=0.03),
                   "1/2 Laplace u = u^3 + u in the unit disk, u = 1 on the circle",
                   {"dims": [9, 9], "n_paths": 2000, "dt": 1e-3})


def disk_cubic_bad_c1() -> Fixture:
    """disk-cubic with c1 declared as 2; validation must reject it."""
    base = disk_cubic()
    p = base.problem.replace(driver=_cubic_driver(2.0), name="disk-cubic-bad-c1")
    return Fixture("disk-cubic-bad-c1", p, base.reference, base.tolerance,
                   "invalid on purpose: (y1-y2)(f(y1)-f(y2)) <= -2|y1-y2|^2 fails near y = 0",
                   dict(base.settings, expect_valid=False))


BHAT_AMPLITUDE = 0.5


def _bhat_potential():
    """psi on the auxiliary box [-0.1, 1.1]^2, zero on its boundary."""
    A, c, L = BHAT_AMPLITUDE, 0.1, 1.2
    k = math.pi / L

    def psi(x):
        return A * np.sin(k * (x[:, 0] + c)) * np.sin(k * (x[:, 1] + c))

    def grad(x):
        s0, s1 = np.sin(k * (x[:, 0] + c)), np.sin(k * (x[:, 1] + c))
        c0, c1 = np.cos(k * (x[:, 0] + c)), np.cos(k * (x[:, 1] + c))
        return A * k * np.stack([c0 * s1, s0 * c1], axis=1)
    return psi, grad


def bhat_gradient() -> Fixture:
    psi, grad = _bhat_potential()
    p = EllipticProblem(Box(np.zeros(2), np.ones(2)), MatrixField.identity(2),
                        ScalarField.const(1.0, 2), 1.0, 1.0,
                        bhat=VectorField(grad, 2, name="grad psi"),
                        driver=Driver.linear_decay(2, 1.0), mode="semilinear",
                        name="bhat-gradient")
    return Fixture("bhat-gradient", p, FdReference((129, 129)), Tolerance("deterministic", rel=0.03),
                   "1/2 Laplace u - div(grad(psi) u) = u on the unit square, u = 1 on the boundary",
                   {"dims": [11, 11], "aux_dims": [61, 61], "n_paths": 1000, "dt": 1e-3,
                    "psi": psi})


def _aniso_field() -> MatrixField:
    def a(x):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 + x[:, 0] ** 2
        out[:, 1, 1] = 1.0
        return out

    def div(x):
        return np.stack([2.0 * x[:, 0], np.zeros(x.shape[0])], axis=1)
    return MatrixField(a, 2, div=div, name="diag(1+x1^2,1)")


def manufactured_aniso() -> Fixture:
    """u* = sin(pi x1) sin(pi x2) with the forcing that makes it exact."""
    pi = math.pi

    def u(x):
        return np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1])

    def grad(x):
        return pi * np.stack([np.cos(pi * x[:, 0]) * np.sin(pi * x[:, 1]),
                              np.sin(pi * x[:, 0]) * np.cos(pi * x[:, 1])], axis=1)

    def forcing(x):
        # F = -1/2 div(a grad u*)
        dx = 2 * x[:, 0] * pi * np.cos(pi * x[:, 0]) * np.sin(pi * x[:, 1])
        return -0.5 * (dx - (2.0 + x[:, 0] ** 2) * pi * pi * u(x))

    p = EllipticProblem(Box(np.zeros(2), np.ones(2)), _aniso_field(), ScalarField.zero(2),
                        1.0, 2.0, forcing=ScalarField(forcing, 2, name="manufactured"),
                        name="manufactured-aniso")
    return Fixture("manufactured-aniso", p, ScalarField(u, 2, grad=grad, name="sin sin"),
                   Tolerance("deterministic", abs=1e-3),
                   "1/2 div(diag(1+x1^2, 1) grad u) = -F with u* = sin(pi x1) sin(pi x2)",
                   {"dims": [65, 65], "points": [[0.5, 0.5], [0.25, 0.75]],
                    "n_paths": 20_000, "dt": 1e-3})


_BUILDERS = {
    "harmonic-ball": harmonic_ball,
    "mean-exit-ball": mean_exit_ball,
    "cosh1d": cosh1d,
    "gauged-decay": gauged_decay,
    "disk-cubic": disk_cubic,
    "bhat-gradient": bhat_gradient,
    "manufactured-aniso": manufactured_aniso,
}

_NEGATIVE = {
    "disk-cubic-bad-c1": disk_cubic_bad_c1,
}


@lru_cache(maxsize=None)
def get_fixture(name: str) -> Fixture:
    """Look up a fixture by name, including the deliberately invalid ones."""
    builder = _BUILDERS.get(name) or _NEGATIVE.get(name)
    if builder is None:
        known = ", ".join(sorted(_BUILDERS) + sorted(_NEGATIVE))
        raise ConfigError(f"unknown registry problem {name!r}; known: {known}")
    return builder()


def registry() -> dict[str, Fixture]:
    """The valid fixtures by name; each passes validate_problem."""
    return {name: get_fixture(name) for name in _BUILDERS}


def registry_names(include_invalid: bool = False) -> list[str]:
    names = list(_BUILDERS)
    return names + list(_NEGATIVE) if include_invalid else names
