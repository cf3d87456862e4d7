"""Tensor-product grid functions: multilinear interpolation, nodal gradients,
and the little-endian binary grid-file format.

Grid file layout::

    d      : uint32
    dims   : uint32 * d
    bbox   : float64 * 2d     (lo_1..lo_d, hi_1..hi_d)
    values : float64 * prod(dims), row-major (last axis fastest)
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Field sampled on the nodes of a regular grid over the box [lo, hi].

    ``values`` has shape ``dims`` or ``dims + (k,)`` for a k-component field.
    Points outside the box evaluate to ``outside_value``.
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    outside_value: float = 0.0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("grid bbox needs lo < hi componentwise")
        if values.ndim < lo.size or any(n < 2 for n in values.shape[: lo.size]):
            raise ValueError("grid needs at least 2 nodes per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, fn, lo, hi, dims, outside_value=0.0) -> "GridFunction":
        """Sample a vectorized callable ``fn((n, d)) -> (n,)`` on the nodes."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        dims = tuple(int(n) for n in dims)
        nodes = grid_nodes(lo, hi, dims)
        vals = np.asarray(fn(nodes), dtype=float)
        return cls(lo, hi, vals.reshape(dims + vals.shape[1:]), outside_value)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.values.shape[: self.d])

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.dims) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, n) for l, h, n in zip(self.lo, self.hi, self.dims)]

    def nodes(self) -> np.ndarray:
        return grid_nodes(self.lo, self.hi, self.dims)

    def with_values(self, values, outside_value=None) -> "GridFunction":
        ov = self.outside_value if outside_value is None else outside_value
        return GridFunction(self.lo, self.hi, np.asarray(values).reshape(self.values.shape), ov)

    @cached_property
    def nodal_gradient(self) -> np.ndarray:
        """Central differences inside, one-sided on the box faces; shape dims + (d,)."""
        if self.values.ndim != self.d:
            raise ValueError("gradient is only defined for scalar grid functions")
        grads = np.gradient(self.values, *self.spacing, edge_order=1)
        if self.d == 1:
            grads = [grads]
        return np.stack(grads, axis=-1)

    @cached_property
    def _stacked(self) -> np.ndarray:
        n = int(np.prod(self.dims))
        return np.concatenate(
            [self.values.reshape(n, 1), self.nodal_gradient.reshape(n, self.d)], axis=1
        )

    def _weights(self, x):
        x = np.asarray(x, dtype=float)
        h = self.spacing
        dims = np.asarray(self.dims)
        t = (x - self.lo) / h
        tol = 1e-9
        inside = np.all((t >= -tol) & (t <= dims - 1 + tol), axis=1)
        base = np.clip(np.floor(t).astype(np.int64), 0, dims - 2)
        w = np.clip(t - base, 0.0, 1.0)
        strides = np.array([int(np.prod(self.dims[k + 1:])) for k in range(self.d)], dtype=np.int64)
        flat0 = base @ strides
        corners = []
        for offs in itertools.product((0, 1), repeat=self.d):
            offs = np.asarray(offs)
            wt = np.prod(np.where(offs == 1, w, 1.0 - w), axis=1)
            corners.append((flat0 + int(offs @ strides), wt))
        return inside, corners

    def _interp(self, table: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
        inside, corners = self._weights(x)
        out = np.zeros((inside.size,) + table.shape[1:])
        for idx, wt in corners:
            out += wt.reshape((-1,) + (1,) * (table.ndim - 1)) * table[idx]
        return out, inside

    def __call__(self, x) -> np.ndarray:
        pts, single = as_points(x, self.d)
        n = int(np.prod(self.dims))
        table = self.values.reshape((n,) + self.values.shape[self.d:])
        out, inside = self._interp(table, pts)
        out[~inside] = self.outside_value
        return out[0] if single else out

    def gradient(self, x) -> np.ndarray:
        pts, single = as_points(x, self.d)
        n = int(np.prod(self.dims))
        out, inside = self._interp(self.nodal_gradient.reshape(n, self.d), pts)
        out[~inside] = 0.0
        return out[0] if single else out

    def sample(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Value and gradient at ``x`` of shape (n, d), sharing one weight pass."""
        out, inside = self._interp(self._stacked, x)
        val = out[:, 0]
        grad = out[:, 1:]
        val[~inside] = self.outside_value
        grad[~inside] = 0.0
        return val, grad

    # -- binary IO ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        if self.values.ndim != self.d:
            raise ValueError("only scalar grid functions can be written")
        header = struct.pack(f"<I{self.d}I", self.d, *self.dims)
        bbox = np.concatenate([self.lo, self.hi]).astype("<f8").tobytes()
        return header + bbox + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, outside_value: float = 0.0) -> "GridFunction":
        (d,) = struct.unpack_from("<I", raw, 0)
        dims = struct.unpack_from(f"<{d}I", raw, 4)
        off = 4 + 4 * d
        bbox = np.frombuffer(raw, dtype="<f8", count=2 * d, offset=off)
        off += 16 * d
        count = int(np.prod(dims))
        if len(raw) != off + 8 * count:
            raise ValueError(f"grid file size mismatch: expected {off + 8 * count} bytes, got {len(raw)}")
        vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(float)
        return cls(bbox[:d].copy(), bbox[d:].copy(), vals.reshape(dims), outside_value)

    @classmethod
    def load(cls, path, outside_value: float = 0.0) -> "GridFunction":
        return cls.from_bytes(Path(path).read_bytes(), outside_value)


def grid_nodes(lo, hi, dims) -> np.ndarray:
    """All nodes of the grid as an (N, d) array in row-major order."""
    axes = [np.linspace(l, h, n) for l, h, n in zip(lo, hi, dims)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def as_points(x, d: int) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to an (n, d) array; a 1-D input is one point of length d."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and d == 1:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if x.size != d:
            raise ValueError(f"point has {x.size} coordinates, expected {d}")
        return x.reshape(1, d), True
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected points of shape (n, {d}), got {x.shape}")
    return x, False


# Cubic Hermite basis on [0, 1] in the power basis: rows are the data
# (p(0), p(1), h p'(0), h p'(1)), columns the coefficients of 1, t, t^2, t^3.
_HERMITE = np.array([
    [1.0, 0.0, -3.0, 2.0],
    [0.0, 0.0, 3.0, -2.0],
    [0.0, 1.0, -2.0, 1.0],
    [0.0, 0.0, -1.0, 1.0],
])


class HermiteSampler:
    """C1 tensor-product cubic Hermite reconstruction of a scalar grid function.

    Nodal slopes (and mixed derivatives) are second-order finite differences
    of the nodal values, so value and gradient come from one consistent
    piecewise-cubic function.  Per-cell power-basis coefficients are built
    once; evaluation gathers one coefficient block per point.  Points are
    clamped to the grid box.
    """

    def __init__(self, g: GridFunction):
        if g.values.ndim != g.d:
            raise ValueError("Hermite reconstruction needs a scalar grid function")
        if min(g.dims) < 3:
            raise ValueError("Hermite reconstruction needs at least 3 nodes per axis")
        self.lo, self.hi, self.d = g.lo, g.hi, g.d
        self.h = g.spacing
        self.ncell = np.asarray(g.dims) - 1
        d = g.d
        # derivative table D^alpha u (scaled by h^alpha) for alpha in {0,1}^d
        data = {}
        for alpha in itertools.product((0, 1), repeat=d):
            v = g.values
            for k, ak in enumerate(alpha):
                if ak:
                    v = np.gradient(v, axis=k, edge_order=2)
            data[alpha] = v
        # block[cell, i_1..i_d] with i_k in 0..3 = (corner0, corner1, slope0, slope1)
        cell_shape = tuple(int(n) for n in self.ncell)
        block = np.empty(cell_shape + (4,) * d)
        for idx in itertools.product(range(4), repeat=d):
            alpha = tuple(i // 2 for i in idx)
            sl = tuple(slice(i % 2, i % 2 + n) for i, n in zip(idx, cell_shape))
            block[(Ellipsis,) + idx] = data[alpha][sl]
        coef = block
        for k in range(d):
            # contract data axis k with the basis matrix; the new axis goes last,
            # so after d rounds the coefficient axes are back in order
            coef = np.tensordot(coef, _HERMITE, axes=([len(cell_shape)], [0]))
        self.coef = coef.reshape(int(np.prod(cell_shape)), 4**d)
        self.coef_t = np.ascontiguousarray(self.coef.T)
        self.strides = np.array([int(np.prod(cell_shape[k + 1:])) for k in range(d)], dtype=np.int64)

    def sample(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Value (n,) and gradient (n, d) at points of shape (n, d)."""
        x = np.asarray(x, dtype=float)
        d = self.d
        t = (np.clip(x, self.lo, self.hi) - self.lo) / self.h
        cell = np.minimum(t.astype(np.int64), self.ncell - 1)
        t = t - cell
        flat = cell[:, 0] * self.strides[0]
        for k in range(1, d):
            flat = flat + cell[:, k] * self.strides[k]
        c = np.take(self.coef_t, flat, axis=1)
        if d == 1:
            tx = t[:, 0]
            val = _horner(c, tx)
            grad = (_dhorner(c, tx) / self.h[0])[:, None]
            return val, grad
        if d == 2:
            tx, ty = t[:, 0], t[:, 1]
            cy = [_horner(c[4 * i: 4 * i + 4], ty) for i in range(4)]
            dcy = [_dhorner(c[4 * i: 4 * i + 4], ty) for i in range(4)]
            val = _horner(cy, tx)
            g0 = _dhorner(cy, tx) / self.h[0]
            g1 = _horner(dcy, tx) / self.h[1]
            return val, np.stack([g0, g1], axis=1)
        c = c.T.reshape((-1,) + (4,) * d)
        pw, dpw = [], []
        one = np.ones(t.shape[0])
        for k in range(d):
            tk = t[:, k]
            pw.append(np.stack([one, tk, tk * tk, tk * tk * tk], axis=1))
            dpw.append(np.stack([0.0 * one, one, 2.0 * tk, 3.0 * tk * tk], axis=1) / self.h[k])
        val = _contract(c, pw)
        grad = np.stack([_contract(c, [dpw[j] if j == k else pw[j] for j in range(d)])
                         for k in range(d)], axis=1)
        return val, grad

    def __call__(self, x) -> np.ndarray:
        return self.sample(x)[0]


def _contract(c: np.ndarray, vecs) -> np.ndarray:
    for v in reversed(vecs):
        c = np.einsum("n...i,ni->n...", c, v)
    return c


def _horner(c, t):
    return c[0] + t * (c[1] + t * (c[2] + t * c[3]))


def _dhorner(c, t):
    return c[1] + t * (2.0 * c[2] + 3.0 * t * c[3])
