"""Uniform-grid bucket index for fixed-radius neighbor queries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import PercolipError, SizeError


#: Cell boxes up to this size get a dense offset table instead of binary search.
DENSE_CELL_LIMIT = 1 << 20


@dataclass(frozen=True, eq=False)
class GridIndex:
    """Points bucketed by ``floor((p - origin) / cell_size)``.

    Occupied cells are stored sorted by their linear key; ``order`` lists
    point indices grouped by cell (ascending inside a cell) and
    ``starts[c]:starts[c+1]`` is the slice of cell ``c``.
    """

    points: np.ndarray
    cell_size: float
    origin: np.ndarray
    cell_lo: np.ndarray
    dims: np.ndarray
    strides: np.ndarray
    keys: np.ndarray
    starts: np.ndarray
    order: np.ndarray
    dense: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def cell_of(self, p) -> tuple[int, ...]:
        p = np.asarray(p, dtype=float)
        return tuple(int(c) for c in np.floor((p - self.origin) / self.cell_size))

    @cached_property
    def buckets(self) -> dict[tuple[int, ...], list[int]]:
        """Mapping from integer cell coordinates to the point indices inside."""
        out = {}
        for c, key in enumerate(self.keys):
            rel = []
            rem = int(key)
            for s in self.strides[::-1]:
                rel.append(rem // int(s))
                rem %= int(s)
            rel = rel[::-1]
            cell = tuple(int(self.cell_lo[a]) + rel[a] for a in range(self.dim))
            out[cell] = [int(i) for i in self.order[self.starts[c]:self.starts[c + 1]]]
        return out

    def kernel_args(self):
        return (self.points, self.origin, float(self.cell_size), self.cell_lo, self.dims,
                self.strides, self.keys, self.starts, self.dense, self.order)


def build_index(points, cell_size: float, origin=None) -> GridIndex:
    """Bucket ``points`` into a uniform grid of side ``cell_size``."""
    if not cell_size > 0 or not math.isfinite(cell_size):
        raise PercolipError(f"cell_size must be positive and finite, got {cell_size}")
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise PercolipError(f"points must be a (k, d) array, got shape {pts.shape}")
    d = pts.shape[1]
    origin = np.zeros(d) if origin is None else np.asarray(origin, dtype=np.float64).reshape(d)
    if len(pts) == 0:
        z = np.zeros(d, np.int64)
        return GridIndex(pts, float(cell_size), origin, z, np.ones(d, np.int64), np.ones(d, np.int64),
                         np.empty(0, np.int64), np.zeros(1, np.int64), np.empty(0, np.int64),
                         np.empty(0, np.int64))
    cells = np.floor((pts - origin) / cell_size).astype(np.int64)
    cell_lo = cells.min(axis=0)
    dims = cells.max(axis=0) - cell_lo + 1
    if np.prod(dims.astype(float)) > 2.0**62:
        raise SizeError("grid too fine for the point extent; increase cell_size")
    strides = np.ones(d, np.int64)
    for a in range(1, d):
        strides[a] = strides[a - 1] * dims[a - 1]
    lin = (cells - cell_lo) @ strides
    order = np.argsort(lin, kind="stable").astype(np.int64)
    sorted_keys = lin[order]
    keys, first = np.unique(sorted_keys, return_index=True)
    starts = np.append(first, len(pts)).astype(np.int64)
    n_cells = int(np.prod(dims))
    if n_cells <= max(16 * len(pts), DENSE_CELL_LIMIT):
        dense = np.searchsorted(sorted_keys, np.arange(n_cells + 1)).astype(np.int64)
    else:
        dense = np.empty(0, np.int64)
    return GridIndex(pts, float(cell_size), origin, cell_lo, dims.astype(np.int64), strides,
                     keys.astype(np.int64), starts, order, dense)


def neighbors_within(index: GridIndex, q, radius: float) -> np.ndarray:
    """Indices of points in the closed ball ``B(q, radius)``, ascending."""
    if not radius >= 0:
        raise PercolipError(f"radius must be non-negative, got {radius}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise PercolipError(f"query has dimension {q.shape[0]}, index has {index.dim}")
    if index.n_points == 0:
        return np.empty(0, np.int64)
    return _kernels.query_ball(*index.kernel_args(), q, float(radius))
