"""Bounded domains: membership, boundary distance and exit projection.

All methods are vectorized over points of shape (n, d); a 1-D array is
treated as a single point.  Points exactly on the boundary are *not*
contained (they count as exited).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoCrossing, OutsideDomain
from .grid import as_points


class Domain:
    d: int

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def contains(self, x):
        pts, single = as_points(x, self.d)
        inside = self._sd(pts) < 0.0
        return bool(inside[0]) if single else inside

    def boundary_distance(self, x):
        pts, single = as_points(x, self.d)
        sd = self._sd(pts)
        if np.any(sd >= 0.0):
            bad = pts[np.argmax(sd >= 0.0)]
            raise OutsideDomain(f"point {bad} is not inside the domain")
        dist = -sd
        return float(dist[0]) if single else dist

    def project_exit(self, x_in, x_out):
        """Intersection of the segment [x_in, x_out] with the boundary."""
        p_in, single = as_points(x_in, self.d)
        p_out, _ = as_points(x_out, self.d)
        pts, _ = self._crossing(p_in, p_out)
        return pts[0] if single else pts

    def crossing(self, x_in, x_out) -> tuple[np.ndarray, np.ndarray]:
        """Exit points and affine crossing fractions theta in [0, 1]."""
        return self._crossing(np.asarray(x_in, float), np.asarray(x_out, float))

    def closest_boundary_point(self, x) -> np.ndarray:
        pts, single = as_points(x, self.d)
        out = self._closest(pts)
        return out[0] if single else out

    def signed_distance(self, x):
        pts, single = as_points(x, self.d)
        sd = self._sd(pts)
        return float(sd[0]) if single else sd

    # subclass hooks, always (n, d) in and out
    def _sd(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _crossing(self, p_in, p_out):
        raise NotImplementedError

    def _closest(self, pts):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Ball(Domain):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ConfigError("ball radius must be positive")

    @property
    def d(self) -> int:
        return self.center.size

    @property
    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def _sd(self, pts):
        rel = pts - self.center
        return np.sqrt(np.einsum("ij,ij->i", rel, rel)) - self.radius

    def _crossing(self, p_in, p_out):
        p = p_in - self.center
        v = p_out - p_in
        A = np.einsum("ij,ij->i", v, v)
        B = np.einsum("ij,ij->i", p, v)
        C = np.einsum("ij,ij->i", p, p) - self.radius**2
        disc = np.sqrt(np.maximum(B * B - A * C, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            # stable form of the larger root of A t^2 + 2 B t + C = 0 (C <= 0)
            t = np.where(B >= 0.0, -C / (B + disc), (disc - B) / A)
        t = np.clip(np.nan_to_num(t, nan=1.0), 0.0, 1.0)
        return p_in + t[:, None] * v, t

    def _closest(self, pts):
        rel = pts - self.center
        nrm = np.linalg.norm(rel, axis=1)
        unit = np.zeros_like(rel)
        ok = nrm > 0
        unit[ok] = rel[ok] / nrm[ok, None]
        unit[~ok, 0] = 1.0
        return self.center + self.radius * unit


@dataclass(frozen=True, eq=False)
class Box(Domain):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("box needs lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def _sd(self, pts):
        # exact zero on the faces, unlike |x - centre| - half
        q = np.maximum(self.lo - pts, pts - self.hi)
        qp = np.maximum(q, 0.0)
        outside = np.sqrt(np.einsum("ij,ij->i", qp, qp))
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def _crossing(self, p_in, p_out):
        v = p_out - p_in
        t_face = np.full(p_in.shape, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            up = p_out >= self.hi
            down = p_out <= self.lo
            t_face = np.where(up, (self.hi - p_in) / v, t_face)
            t_face = np.where(down, (self.lo - p_in) / v, t_face)
        k = np.argmin(t_face, axis=1)
        rows = np.arange(p_in.shape[0])
        t = np.clip(t_face[rows, k], 0.0, 1.0)
        t = np.where(np.isfinite(t), t, 1.0)
        pts = p_in + t[:, None] * v
        # snap the crossed coordinate exactly onto its face
        pts[rows, k] = np.where(up[rows, k], self.hi[k], np.where(down[rows, k], self.lo[k], pts[rows, k]))
        return pts, t

    def _closest(self, pts):
        out = np.clip(pts, self.lo, self.hi)
        inside = np.all((pts > self.lo) & (pts < self.hi), axis=1)
        if np.any(inside):
            p = pts[inside]
            gaps = np.concatenate([p - self.lo, self.hi - p], axis=1)
            j = np.argmin(gaps, axis=1)
            rows = np.arange(p.shape[0])
            q = p.copy()
            axis = j % self.d
            q[rows, axis] = np.where(j < self.d, self.lo[axis], self.hi[axis])
            out[inside] = q
        return out


@dataclass(frozen=True, eq=False)
class Implicit(Domain):
    """Domain given by a signed-distance function (negative inside).

    Boundary regularity cannot be checked numerically; the caller must
    assert it with ``assume_regular=True``.
    """

    sdf: object
    lo: np.ndarray
    hi: np.ndarray
    assume_regular: bool = False
    bisection_tol: float = 1e-12
    fd_step: float = 1e-6
    _d: int = field(init=False, default=0)

    def __post_init__(self):
        if not self.assume_regular:
            raise ConfigError("implicit domains require assume_regular=true")
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "_d", lo.size)

    @property
    def d(self) -> int:
        return self._d

    @property
    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def _sd(self, pts):
        return np.asarray(self.sdf(pts), dtype=float).reshape(-1)

    def _grad_sd(self, pts):
        g = np.empty_like(pts)
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = self.fd_step
            g[:, k] = (self._sd(pts + e) - self._sd(pts - e)) / (2 * self.fd_step)
        return g

    def _crossing(self, p_in, p_out):
        s_in = self._sd(p_in)
        s_out = self._sd(p_out)
        if np.any(s_in >= 0.0) or np.any(s_out < 0.0):
            raise NoCrossing("signed distance does not bracket the boundary on the segment")
        v = p_out - p_in
        a = np.zeros(p_in.shape[0])
        b = np.ones(p_in.shape[0])
        while np.max(b - a) > self.bisection_tol:
            m = 0.5 * (a + b)
            outside = self._sd(p_in + m[:, None] * v) >= 0.0
            b = np.where(outside, m, b)
            a = np.where(outside, a, m)
        return p_in + b[:, None] * v, b

    def _closest(self, pts):
        p = pts.copy()
        for _ in range(4):
            g = self._grad_sd(p)
            nrm = np.linalg.norm(g, axis=1, keepdims=True)
            p = p - self._sd(p)[:, None] * g / np.where(nrm > 0, nrm * nrm, 1.0)
        return p

    def eikonal_defect(self, n_samples: int = 200, seed: int = 0) -> float:
        """Worst sampled | |grad sd| - 1 | over the bounding box."""
        rng = np.random.default_rng(seed)
        pts = rng.uniform(self.lo, self.hi, size=(n_samples, self.d))
        return float(np.max(np.abs(np.linalg.norm(self._grad_sd(pts), axis=1) - 1.0)))


def domain_from_config(cfg: dict) -> Domain:
    kind = cfg.get("type")
    if kind == "ball":
        return Ball(np.asarray(cfg["center"], dtype=float), float(cfg["radius"]))
    if kind == "box":
        return Box(np.asarray(cfg["lo"], dtype=float), np.asarray(cfg["hi"], dtype=float))
    if kind == "interval":
        return Box(np.array([float(cfg["lo"])]), np.array([float(cfg["hi"])]))
    raise ConfigError(f"unknown domain type {kind!r}")
