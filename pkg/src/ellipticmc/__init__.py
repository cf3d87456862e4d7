"""Monte Carlo and BSDE solvers for semilinear elliptic Dirichlet problems."""

from .bsde import PicardConfig, pathwise_bsde_residual, picard_step, solve_semilinear
from .domain import Ball, Box, Implicit
from .feynman_kac import McEstimate, estimate_gauge, solve_linear, solve_linear_gauged
from .fixtures import get_fixture, registry
from .grid import GridFunction
from .htransform import check_condition_40, check_gauge_condition, solve_auxiliary_v, solve_general
from .oracle import fd_assemble, fd_solve_linear, fd_solve_semilinear
from .problem import (
    Driver,
    EllipticProblem,
    MatrixField,
    ScalarField,
    VectorField,
    fold_q_into_driver,
    validate_problem,
)
from .sde import SimConfig, simulate_path

__version__ = "0.1.0"

__all__ = [
    "Ball", "Box", "Driver", "EllipticProblem", "GridFunction", "Implicit", "MatrixField",
    "McEstimate", "PicardConfig", "ScalarField", "SimConfig", "VectorField",
    "check_condition_40", "check_gauge_condition", "estimate_gauge", "fd_assemble", "fd_solve_linear",
    "fd_solve_semilinear", "fold_q_into_driver", "get_fixture", "pathwise_bsde_residual", "picard_step", "registry",
    "simulate_path", "solve_auxiliary_v", "solve_general", "solve_linear",
    "solve_linear_gauged", "solve_semilinear", "validate_problem",
]
