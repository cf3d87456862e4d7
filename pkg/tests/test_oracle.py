import math

import numpy as np
import pytest

from ellipticmc.domain import Ball, Box
from ellipticmc.errors import GridTooCoarse, NewtonDiverged
from ellipticmc.fixtures import get_fixture
from ellipticmc.oracle import NewtonConfig, fd_assemble, fd_solve_linear, fd_solve_semilinear
from ellipticmc.problem import Driver, EllipticProblem, MatrixField, ScalarField, VectorField

SQUARE = Box(np.zeros(2), np.ones(2))
DISK = Ball(np.zeros(2), 1.0)
INTERVAL = Box(np.array([-1.0]), np.array([1.0]))
SQRT2 = math.sqrt(2.0)


def sinsin(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def test_1d_laplacian_stencil():
    p = EllipticProblem(INTERVAL, MatrixField.identity(1), ScalarField.zero(1), 1.0, 1.0)
    sys = fd_assemble(p, (11,))
    h = 0.2
    row = sys.K.toarray()[4]        # unknown 4 is node 5
    expected = np.zeros(11)
    expected[4:7] = np.array([1.0, -2.0, 1.0]) * 0.5 / h ** 2
    np.testing.assert_allclose(row, expected, atol=1e-12)


def test_constant_flux_telescopes():
    p = EllipticProblem(SQUARE, MatrixField.identity(2), ScalarField.zero(2), 1.0, 1.0,
                        bhat=VectorField.const([0.7, -1.3], 2))
    sys = fd_assemble(p, (17, 17))
    np.testing.assert_allclose(sys.apply(np.ones(sys.nodes.shape[0])), 0.0, atol=1e-11)


def test_symmetry_and_row_sums():
    fx = get_fixture("manufactured-aniso")
    sys = fd_assemble(fx.problem, (17, 17))
    K_ii, _ = sys.split(sys.K2)
    assert abs(K_ii - K_ii.T).max() <= 1e-14
    assert np.abs(np.asarray(sys.K2.sum(axis=1))).max() <= 1e-9
    # full off-diagonal mixed coefficients keep the symmetry
    a = MatrixField.const([[2.0, 0.6], [0.6, 1.0]], 2)
    sys = fd_assemble(EllipticProblem(SQUARE, a, ScalarField.zero(2), 0.5, 2.5), (17, 17))
    K_ii, _ = sys.split(sys.K2)
    assert abs(K_ii - K_ii.T).max() <= 1e-14


def test_manufactured_operator_application_is_second_order():
    p = EllipticProblem(SQUARE, MatrixField.identity(2), ScalarField.zero(2), 1.0, 1.0)
    errs = []
    for n in (17, 33):
        sys = fd_assemble(p, (n, n))
        Au = sys.apply(sinsin(sys.nodes))
        errs.append(np.max(np.abs(Au + np.pi ** 2 * sinsin(sys.unknown_nodes))))
    assert math.log2(errs[0] / errs[1]) >= 1.8


def test_harmonic_polynomial_is_exact():
    phi = ScalarField(lambda x: x[:, 0].copy(), 2)
    p = EllipticProblem(SQUARE, MatrixField.identity(2), phi, 1.0, 1.0)
    u = fd_solve_linear(fd_assemble(p, (17, 17)))
    np.testing.assert_allclose(u.values.reshape(-1), u.nodes()[:, 0], atol=1e-9)


def test_disk_mean_exit_time_first_order():
    # the staircase boundary makes single-level ratios erratic, so fit a slope over four levels
    p = EllipticProblem(DISK, MatrixField.identity(2), ScalarField.zero(2), 1.0, 1.0,
                        forcing=ScalarField.const(1.0, 2))
    ns, errs = (17, 33, 65, 129), []
    for n in ns:
        sys = fd_assemble(p, (n, n))
        u = fd_solve_linear(sys, p.forcing)
        x = sys.unknown_nodes
        errs.append(np.max(np.abs(u.values.reshape(-1)[sys.unknown] - (1 - np.sum(x * x, axis=1)) / 2)))
    assert errs[-1] < 0.01
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert slope >= 0.8


def test_cosh_profile():
    p = EllipticProblem(INTERVAL, MatrixField.identity(1), ScalarField.const(1.0, 1), 1.0, 1.0,
                        q=ScalarField.const(-1.0, 1))
    errs = []
    for n in (21, 41):
        sys = fd_assemble(p, (n,))
        u = fd_solve_linear(sys)
        x = sys.nodes[:, 0]
        errs.append(np.max(np.abs(u.values - np.cosh(SQRT2 * x) / math.cosh(SQRT2))))
    assert math.log2(errs[0] / errs[1]) >= 1.8


def test_manufactured_aniso_converges_at_second_order():
    fx = get_fixture("manufactured-aniso")
    errs = []
    for n in (17, 33, 65):
        sys = fd_assemble(fx.problem, (n, n))
        u = fd_solve_linear(sys, fx.problem.forcing)
        errs.append(np.max(np.abs(u.values.reshape(-1) - fx.reference(sys.nodes))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


def test_discrete_maximum_principle():
    phi = ScalarField(lambda x: np.sin(3 * x[:, 0]) + x[:, 1] ** 2, 2)
    p = EllipticProblem(DISK, MatrixField.const([[1.5, 0.3], [0.3, 1.0]], 2), phi, 0.8, 1.8,
                        q=ScalarField(lambda x: -1.0 - x[:, 0] ** 2, 2),
                        b=VectorField(lambda x: np.stack([x[:, 1], -x[:, 0]], 1), 2))
    sys = fd_assemble(p, (33, 33))
    u = fd_solve_linear(sys).values.reshape(-1)
    bvals = sys.boundary_values[~sys.unknown]
    inner = u[sys.unknown]
    # with q <= 0 the interior stays within [min(0, min phi), max(0, max phi)]
    assert inner.max() <= max(0.0, bvals.max()) + 1e-12
    assert inner.min() >= min(0.0, bvals.min()) - 1e-12


class TestSemilinear:
    def test_zero_driver_equals_linear(self):
        phi = ScalarField(lambda x: x[:, 0] ** 2, 2)
        p = EllipticProblem(DISK, MatrixField.identity(2), phi, 1.0, 1.0, mode="semilinear")
        sys = fd_assemble(p, (33, 33))
        u, tr = fd_solve_semilinear(sys, Driver.zero(2))
        np.testing.assert_allclose(u.values, fd_solve_linear(sys).values, atol=1e-12)

    def test_cosh(self):
        fx = get_fixture("cosh1d")
        errs = []
        for n in (21, 41):
            sys = fd_assemble(fx.problem, (n,))
            u, tr = fd_solve_semilinear(sys, fx.problem.driver)
            assert tr.residuals[-1] <= 1e-9
            errs.append(np.max(np.abs(u.values - fx.reference(sys.nodes))))
        assert math.log2(errs[0] / errs[1]) >= 1.8

    def test_cubic_on_disk_in_unit_interval(self):
        fx = get_fixture("disk-cubic")
        sys = fd_assemble(fx.problem, (33, 33))
        u, tr = fd_solve_semilinear(sys, fx.problem.driver)
        inner = u.values.reshape(-1)[sys.unknown]
        assert np.all((inner > 0) & (inner <= 1))
        # comparison with the driver-free solution u = 1
        assert inner.max() < 1.0

    def test_gradient_slot(self):
        # 1/2 u'' + u' = 0 posed as f(x, y, z) = z, with u(-1) = 0 and u(1) = 1
        phi = ScalarField(lambda x: np.where(x[:, 0] > 0, 1.0, 0.0), 1)
        drv = Driver(lambda x, y, z: z[:, 0], ScalarField.zero(1), 1.0)
        p = EllipticProblem(INTERVAL, MatrixField.identity(1), phi, 1.0, 1.0, driver=drv,
                            mode="semilinear")
        sys = fd_assemble(p, (81,))
        u, _ = fd_solve_semilinear(sys, drv)
        x = sys.nodes[:, 0]
        exact = (np.exp(2.0) - np.exp(-2 * x)) / (np.exp(2.0) - np.exp(-2.0))
        assert np.max(np.abs(u.values - exact)) < 5e-3

    def test_newton_failure_is_reported(self):
        fx = get_fixture("disk-cubic")
        sys = fd_assemble(fx.problem, (17, 17))
        with pytest.raises(NewtonDiverged) as exc:
            fd_solve_semilinear(sys, fx.problem.driver, newton_cfg=NewtonConfig(max_iters=1))
        assert len(exc.value.trace.residuals) == 2


def test_grid_too_coarse():
    p = EllipticProblem(DISK, MatrixField.identity(2), ScalarField.zero(2), 1.0, 1.0)
    with pytest.raises(GridTooCoarse):
        fd_assemble(p, (7, 7))
