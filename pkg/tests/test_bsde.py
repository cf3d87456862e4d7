import math

import numpy as np
import pytest

from ellipticmc.bsde import (
    PicardConfig,
    node_layout,
    pathwise_bsde_residual,
    picard_step,
    problem_driver,
    solve_semilinear,
)
from ellipticmc.domain import Ball, Box
from ellipticmc.errors import ConfigError, DriverBlowup, NoConvergence
from ellipticmc.fixtures import get_fixture
from ellipticmc.grid import GridFunction
from ellipticmc.problem import Driver, EllipticProblem, MatrixField, ScalarField
from ellipticmc.sde import SimConfig

INTERVAL = Box(np.array([-1.0]), np.array([1.0]))
DISK = Ball(np.zeros(2), 1.0)
SMALL = dict(n_paths=400, dt=2e-3)


def test_config_validation():
    with pytest.raises(ConfigError):
        PicardConfig(dims=(2,))
    with pytest.raises(ConfigError):
        PicardConfig(dims=(5,), theta=1.5)
    with pytest.raises(ConfigError):
        PicardConfig(dims=(5,), tol_sup=0.0)
    assert PicardConfig(dims=[5.0]).dims == (5,)


def test_node_layout_holds_phi_outside():
    p = EllipticProblem(DISK, MatrixField.identity(2), ScalarField(lambda x: x[:, 0] + 2, 2), 1, 1)
    lay = node_layout(p, (9, 9))
    out = ~lay.interior
    np.testing.assert_allclose(lay.boundary_values[out], lay.nodes[out, 0] + 2)
    g = lay.grid(np.full(lay.interior.sum(), -1.0))
    assert np.all(g.values.reshape(-1)[lay.interior] == -1.0)
    with pytest.raises(ConfigError):
        node_layout(p, (9,))


def test_problem_driver_folds_potential():
    q = ScalarField.const(-2.0, 1)
    F = ScalarField.const(3.0, 1)
    x, y, z = np.zeros((2, 1)), np.array([1.0, -1.0]), np.zeros((2, 1))
    p = EllipticProblem(INTERVAL, MatrixField.identity(1), ScalarField.zero(1), 1, 1, q=q, forcing=F)
    np.testing.assert_allclose(problem_driver(p)(x, y, z), [1.0, 5.0])
    ps = p.replace(mode="semilinear", forcing=ScalarField.zero(1), driver=Driver.linear_decay(1, 1.0))
    # -y from the driver and -2 y from q
    np.testing.assert_allclose(problem_driver(ps)(x, y, z), [-3.0, 3.0])
    assert problem_driver(p.replace(q=ScalarField.zero(1), forcing=ScalarField.zero(1))).is_zero


def test_zero_driver_converges_at_once():
    p = EllipticProblem(DISK, MatrixField.identity(2), ScalarField(lambda x: x[:, 0].copy(), 2), 1, 1,
                        mode="semilinear")
    cfg = PicardConfig(dims=(7, 7), **SMALL)
    u, tr = solve_semilinear(p, cfg)
    assert tr.iterations == 1 and tr.sup_diffs[0] == 0.0
    assert tr.theta == 1.0
    # with f = 0 the step does not look at the previous iterate
    lay = node_layout(p, (7, 7))
    junk = lay.grid(np.random.default_rng(0).normal(size=lay.interior.sum()))
    assert np.array_equal(picard_step(p, junk, cfg).values, u.values)


def test_cosh_fixture_small():
    fx = get_fixture("cosh1d")
    u, tr = solve_semilinear(fx.problem, PicardConfig(dims=(11,), **SMALL))
    assert tr.converged and tr.iterations <= 15
    # L = 1 and max E[tau] = 1 give theta = 2 / 3 up to sampling error in E[tau]
    assert 0.6 < tr.theta < 0.72
    err = np.abs(u.values - fx.reference_values(u.nodes()))
    assert np.all(err <= np.maximum(3 * np.r_[0, tr.node_se, 0], 0.02))


def test_picard_steps_share_paths():
    fx = get_fixture("cosh1d")
    cfg = PicardConfig(dims=(9,), **SMALL)
    lay = node_layout(fx.problem, cfg.dims)
    g = lay.grid(np.full(lay.interior.sum(), 0.5))
    assert np.array_equal(picard_step(fx.problem, g, cfg).values, picard_step(fx.problem, g, cfg).values)


def test_no_convergence_carries_trace():
    fx = get_fixture("cosh1d")
    cfg = PicardConfig(dims=(9,), max_iters=1, tol_sup=1e-12, **SMALL)
    with pytest.raises(NoConvergence) as exc:
        solve_semilinear(fx.problem, cfg)
    assert exc.value.trace.iterations == 1
    u, tr = solve_semilinear(fx.problem, cfg, raise_on_failure=False)
    assert not tr.converged


def test_driver_blowup():
    drv = Driver(lambda x, y, z: 1e20 + 0 * y, ScalarField.zero(1), name="huge")
    p = EllipticProblem(INTERVAL, MatrixField.identity(1), ScalarField.zero(1), 1, 1, driver=drv,
                        mode="semilinear")
    with pytest.raises(DriverBlowup):
        solve_semilinear(p, PicardConfig(dims=(5,), n_paths=20, dt=1e-2))


def test_residual_of_exact_solution_is_centred():
    fx = get_fixture("cosh1d")
    u = GridFunction.from_function(fx.reference.fn, [-1.0], [1.0], (41,))
    est = pathwise_bsde_residual(fx.problem, u, 2000, SimConfig(dt=1e-3), points=[[0.0], [0.5]])
    assert abs(est.mean) <= 3 * est.std_error + 2e-3
    assert est.second_moment > 0
    # a wrong field has a clearly non-zero residual
    bad = GridFunction.from_function(lambda x: 0.2 + 0 * x[:, 0], [-1.0], [1.0], (41,))
    est_bad = pathwise_bsde_residual(fx.problem, bad, 500, SimConfig(dt=1e-3), points=[[0.0]])
    assert abs(est_bad.mean) > 10 * est_bad.std_error


def test_linear_mode_matches_gauged_value():
    # q = -1 in linear mode runs through the same Picard machinery
    fx = get_fixture("gauged-decay")
    u, tr = solve_semilinear(fx.problem, PicardConfig(dims=(9,), **SMALL))
    x = u.nodes()
    assert np.max(np.abs(u.values - fx.reference_values(x))) < 0.03
    assert math.isfinite(tr.sup_norm)
