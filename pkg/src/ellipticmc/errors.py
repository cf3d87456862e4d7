"""Exception hierarchy shared by the solver modules."""

from __future__ import annotations

import numpy as np


class EllipticMCError(Exception):
    """Base class for all package errors."""


class ValidationError(EllipticMCError):
    """A sampled standing assumption failed; carries the witnessing point."""

    def __init__(self, message: str, point=None, margin: float | None = None):
        super().__init__(message)
        self.point = None if point is None else np.asarray(point, dtype=float)
        self.margin = margin


class EllipticityViolation(ValidationError):
    pass


class MonotonicityViolation(ValidationError):
    pass


class LipschitzViolation(ValidationError):
    pass


class GrowthViolation(ValidationError):
    pass


class NotSPD(EllipticityViolation):
    """Cholesky pivot below the ellipticity floor during a solve."""


class OutsideDomain(EllipticMCError):
    pass


class NoCrossing(EllipticMCError):
    pass


class NotExited(EllipticMCError):
    pass


class TooManyCensored(EllipticMCError):
    def __init__(self, n_censored: int, n_paths: int, limit: float):
        super().__init__(
            f"{n_censored} of {n_paths} paths hit t_max (limit fraction {limit:g})"
        )
        self.n_censored = n_censored
        self.n_paths = n_paths


class GaugeOverflow(EllipticMCError):
    def __init__(self, message: str, max_exponent: float):
        super().__init__(message)
        self.max_exponent = max_exponent


class DriverBlowup(EllipticMCError):
    pass


class NoConvergence(EllipticMCError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class SolverStall(EllipticMCError):
    pass


class GridTooCoarse(EllipticMCError):
    pass


class NewtonDiverged(EllipticMCError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ConfigError(EllipticMCError):
    pass


class StageError(EllipticMCError):
    """Wraps an error raised inside one stage of a multi-stage pipeline."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
