import math

import numpy as np
import pytest

from ellipticmc.bsde import PicardConfig, solve_semilinear
from ellipticmc.domain import Ball, Box
from ellipticmc.errors import ConfigError, NoConvergence, StageError
from ellipticmc.fixtures import get_fixture
from ellipticmc.grid import GridFunction
from ellipticmc.htransform import (
    auxiliary_box,
    build_transform,
    check_gauge_condition,
    face_divergence,
    solve_auxiliary_v,
    solve_general,
)
from ellipticmc.problem import Driver, EllipticProblem, MatrixField, ScalarField, VectorField
from ellipticmc.sde import SimConfig

SQUARE = Box(np.zeros(2), np.ones(2))
SMALL = dict(n_paths=300, dt=2e-3)


def test_auxiliary_box():
    p = EllipticProblem(Ball(np.array([1.0, 0.0]), 0.5), MatrixField.identity(2), ScalarField.zero(2), 1, 1)
    B = auxiliary_box(p)
    np.testing.assert_allclose(B.lo, [0.4, -0.6])
    np.testing.assert_allclose(B.hi, [1.6, 0.6])


def test_face_divergence_exact_for_quadratic_flux():
    bhat = VectorField(lambda x: np.stack([x[:, 0] ** 2, 3 * x[:, 1]], 1), 2)
    x = np.random.default_rng(0).uniform(0, 1, (20, 2))
    np.testing.assert_allclose(face_divergence(bhat, x, np.array([0.1, 0.2])), 2 * x[:, 0] + 3, atol=1e-12)


def test_auxiliary_solve_second_order():
    fx = get_fixture("bhat-gradient")
    psi = fx.settings["psi"]
    B = auxiliary_box(fx.problem)
    errs = []
    for n in (17, 33, 65):
        v = solve_auxiliary_v(fx.problem.a, fx.problem.bhat, B, (n, n))
        errs.append(np.max(np.abs(v.values.reshape(-1) + 2 * psi(v.nodes()))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


def test_zero_bhat_is_identity():
    fx = get_fixture("disk-cubic")
    B = auxiliary_box(fx.problem)
    v = solve_auxiliary_v(fx.problem.a, fx.problem.bhat, B, (9, 9))
    assert not np.any(v.values)
    data = build_transform(fx.problem, v)
    assert data.identity and data.transformed is fx.problem
    cfg = PicardConfig(dims=(7, 7), **SMALL)
    u1, _, _ = solve_general(fx.problem, (9, 9), cfg)
    u2, _ = solve_semilinear(fx.problem, cfg)
    assert np.max(np.abs(u1.values - u2.values)) <= 1e-12


def test_transformed_operator_conjugates_the_original():
    # v linear and bhat constant satisfy div(grad v) = -2 div(bhat) = 0; then
    # (L̂ + q̂)(h u) = h (L + q) u for any smooth u
    c = np.array([0.4, -0.7])
    v = GridFunction.from_function(lambda x: x @ c, [-0.1, -0.1], [1.1, 1.1], (5, 5))
    b = VectorField(lambda x: np.stack([x[:, 1], 1 + 0 * x[:, 0]], 1), 2)
    p = EllipticProblem(SQUARE, MatrixField.identity(2), ScalarField.zero(2), 1, 1, b=b,
                        bhat=VectorField.const([0.3, 0.5], 2), q=ScalarField(lambda x: -x[:, 0], 2))
    tp = build_transform(p, v).transformed
    assert tp.bhat.is_zero
    x = np.random.default_rng(1).uniform(0.1, 0.9, (30, 2))
    u = np.sin(x[:, 0]) * np.exp(x[:, 1])
    gu = np.stack([np.cos(x[:, 0]) * np.exp(x[:, 1]), u], 1)
    lap_u = 0.0 * u
    h = np.exp(x @ c)
    gh_u = h[:, None] * (gu + u[:, None] * c)
    lap_hu = h * (lap_u + 2 * gu @ c + u * (c @ c))
    lhs = 0.5 * lap_hu + np.einsum("ni,ni->n", tp.b.fn(x), gh_u) + tp.q.fn(x) * h * u
    rhs = h * (0.5 * lap_u + np.einsum("ni,ni->n", b.fn(x) - p.bhat.fn(x), gu) + p.q.fn(x) * u)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    np.testing.assert_allclose(tp.phi.fn(x), 0.0)


def test_transformed_driver():
    c = np.array([0.5, 0.0])
    v = GridFunction.from_function(lambda x: x @ c, [-0.1, -0.1], [1.1, 1.1], (5, 5))
    drv = Driver(lambda x, y, z: -y - z[:, 0], ScalarField.const(1.0, 2), 1.0)
    p = EllipticProblem(SQUARE, MatrixField.identity(2), ScalarField.const(2.0, 2), 1, 1,
                        bhat=VectorField.const([0.1, 0.0], 2), driver=drv, mode="semilinear")
    tp = build_transform(p, v).transformed
    x = np.array([[0.5, 0.5]])
    h = math.exp(0.25)
    y, z = np.array([3.0]), np.array([[1.0, 2.0]])
    # h f(x, y / h, (z - y grad v) / h) = -y - (1 - 3 * 0.5)
    np.testing.assert_allclose(tp.driver.f(x, y, z), [-3.0 + 0.5])
    np.testing.assert_allclose(tp.phi.fn(x), [2.0 * h])


def test_solve_general_small():
    fx = get_fixture("bhat-gradient")
    u, tr, data = solve_general(fx.problem, (33, 33), PicardConfig(dims=(7, 7), **SMALL))
    assert not data.identity and tr.converged
    x = u.nodes()
    ref = fx.reference_values(x)
    assert np.max(np.abs(u.values.reshape(-1) - ref) / np.abs(ref)) <= 0.03


def test_stage_errors_name_the_stage():
    fx = get_fixture("bhat-gradient")
    cfg = PicardConfig(dims=(5, 5), max_iters=1, tol_sup=1e-14, n_paths=20, dt=1e-2)
    with pytest.raises(StageError) as exc:
        solve_general(fx.problem, (17, 17), cfg)
    assert exc.value.stage == "semilinear" and isinstance(exc.value.cause, NoConvergence)
    with pytest.raises(StageError) as exc:
        solve_general(fx.problem, (5, 5), cfg)
    assert exc.value.stage == "auxiliary"


class TestGaugeCondition:
    def test_delta_must_exceed_inverse_lambda(self):
        fx = get_fixture("cosh1d")
        data = build_transform(fx.problem, solve_auxiliary_v(fx.problem.a, fx.problem.bhat,
                                                             auxiliary_box(fx.problem), (9,)))
        with pytest.raises(ConfigError):
            check_gauge_condition(data, [0.0], 1.0, 10, SimConfig())

    def test_identity_transform_without_driver_terms(self):
        p = EllipticProblem(Box(np.array([-1.0]), np.array([1.0])), MatrixField.identity(1),
                            ScalarField.const(1.0, 1), 1, 1)
        data = build_transform(p, GridFunction(np.array([-1.2]), np.array([1.2]), np.zeros(9)))
        est = check_gauge_condition(data, [0.0], 1.5, 50, SimConfig(dt=1e-3))
        assert est.mean == 1.0

    def test_monotone_driver_damps_the_gauge(self):
        # -2 J1 = -2 for the linear-decay driver: the gauge is E exp(-2 tau) < 1
        fx = get_fixture("cosh1d")
        data = build_transform(fx.problem, GridFunction(np.array([-1.2]), np.array([1.2]), np.zeros(9)))
        est = check_gauge_condition(data, [0.0], 1.5, 2000, SimConfig(dt=1e-3))
        ref = 1 / math.cosh(2.0)
        assert abs(est.mean - ref) <= 3 * est.std_error + 0.01
