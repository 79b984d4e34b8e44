"""Step-constrained Euclidean graph distances.

The distance between two arbitrary points x, y of space is the length of the
shortest chain of cloud points whose first element lies within h/2 of x,
whose last element lies within h/2 of y, and whose consecutive gaps are at
most h.  Only the inter-point hops count towards the length.

The search is a label-setting Dijkstra on the implicit geometric graph with a
virtual source (zero-weight edges to every point in the source halo) and
virtual targets.  Edges are enumerated on the fly from a :class:`GridIndex`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import PercolipError
from .pointcloud import EnrichedCloud, c_d, c_d_prime
from .spatial import GridIndex, build_index, neighbors_within


@dataclass(frozen=True)
class PathQuery:
    x: tuple[float, ...]
    y: tuple[float, ...]
    h: float

    def __post_init__(self):
        x = tuple(float(v) for v in self.x)
        y = tuple(float(v) for v in self.y)
        if len(x) != len(y):
            raise PercolipError(f"endpoints differ in dimension: {len(x)} vs {len(y)}")
        if not all(math.isfinite(v) for v in x + y):
            raise PercolipError("endpoints must be finite")
        if not self.h > 0 or not math.isfinite(self.h):
            raise PercolipError(f"step size h must be positive and finite, got {self.h}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "h", float(self.h))

    @property
    def separation(self) -> float:
        return math.dist(self.x, self.y)


@dataclass(frozen=True)
class DistanceResult:
    length: float
    path: tuple[int, ...] = ()
    explored: int = 0
    hops: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "hops", max(len(self.path) - 1, 0))

    @property
    def finite(self) -> bool:
        return math.isfinite(self.length)

    def to_dict(self) -> dict:
        return {
            "length": self.length if self.finite else "inf",
            "hops": self.hops,
            "path": list(self.path),
            "explored": self.explored,
        }


INFINITE = DistanceResult(math.inf)


def path_length(points: np.ndarray, path: Sequence[int]) -> float:
    """Sum of consecutive Euclidean gaps along ``path`` (left to right).

    Squared gaps are accumulated axis by axis, the same rounding as the search.
    """
    pts = np.asarray(points, dtype=np.float64)
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        d2 = 0.0
        for k in range(pts.shape[1]):
            diff = float(pts[b, k]) - float(pts[a, k])
            d2 += diff * diff
        total += math.sqrt(d2)
    return total


def _reconstruct(pred: np.ndarray, v: int) -> tuple[int, ...]:
    path = []
    while v >= 0:
        path.append(int(v))
        v = pred[v]
    return tuple(reversed(path))


def _best_target(dist: np.ndarray, pred: np.ndarray, halo: np.ndarray) -> int:
    if len(halo) == 0:
        return -1
    dh = dist[halo]
    best = dh.min()
    if not math.isfinite(best):
        return -1
    ties = halo[dh == best]
    if len(ties) == 1:
        return int(ties[0])
    # lexicographically smallest full path among equal-length candidates
    return int(min(ties, key=lambda v: _reconstruct(pred, v)))


def _check_dim(index: GridIndex, *vecs) -> None:
    for v in vecs:
        if len(v) != index.dim:
            raise PercolipError(f"query dimension {len(v)} does not match cloud dimension {index.dim}")


def _search(index: GridIndex, x, targets, h: float, halo: float, clip_radius: float | None,
            stop_at: float = math.inf):
    x = np.asarray(x, dtype=np.float64)
    sources = neighbors_within(index, x, halo)
    n_t = len(targets)
    mask = np.zeros(index.n_points, np.int64)
    halos = []
    for t, y in enumerate(targets):
        hal = neighbors_within(index, y, halo)
        mask[hal] |= np.int64(1) << np.int64(t)
        halos.append(hal)
    if clip_radius is None:
        center, r2 = x, math.inf
    else:
        center, r2 = x, clip_radius * clip_radius
    dist, pred, explored = _kernels.dijkstra(*index.kernel_args(), sources, float(h), mask, n_t,
                                             center, r2, float(stop_at))
    return dist, pred, explored, halos


def distances_to(points, index: GridIndex, x, targets: Sequence, h: float, *,
                 halo: float | None = None, clip: bool = False) -> list[DistanceResult]:
    """Distances from ``x`` to each of up to 63 ``targets`` in one search.

    ``halo`` is the endpoint membership radius (``h/2`` by default).  With
    ``clip=True`` the search is confined to the localization ball
    ``B(x, C_d' * max|x - y|)``; if that changes the answer (an infinite
    result or a path touching the clip boundary) the query is rerun unclipped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if index.points is not pts and not (index.points.shape == pts.shape and np.array_equal(index.points, pts)):
        raise PercolipError("index was built over a different point set")
    if not h > 0:
        raise PercolipError(f"step size h must be positive, got {h}")
    targets = [np.asarray(y, dtype=np.float64).reshape(-1) for y in targets]
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_dim(index, x, *targets)
    if not 0 < len(targets) <= 63:
        raise PercolipError("between 1 and 63 targets per search")
    if index.n_points == 0:
        return [INFINITE] * len(targets)
    halo = 0.5 * h if halo is None else float(halo)

    clip_radius = None
    if clip:
        sep = max(float(np.linalg.norm(y - x)) for y in targets)
        clip_radius = c_d_prime(index.dim) * sep + halo
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        corner = np.maximum(np.abs(lo - x), np.abs(hi - x))
        if float(np.sqrt(np.sum(corner * corner))) <= clip_radius - h:
            # every point is inside the clip ball already
            clip_radius = None
    dist, pred, explored, halos = _search(index, x, targets, h, halo, clip_radius)

    results = []
    for hal in halos:
        v = _best_target(dist, pred, hal)
        if v < 0:
            results.append(DistanceResult(math.inf, (), explored))
        else:
            results.append(DistanceResult(float(dist[v]), _reconstruct(pred, v), explored))

    if clip_radius is not None:
        touched = False
        for r in results:
            if not r.finite:
                touched = True
                break
            far = np.linalg.norm(pts[list(r.path)] - x, axis=1).max()
            if far > clip_radius - h:
                touched = True
                break
        if touched:
            return distances_to(pts, index, x, targets, h, halo=halo, clip=False)
    return results


def distances_to_many(points, index: GridIndex, x, ys, h: float, *, halo: float | None = None,
                      clip_radius: float | None = None) -> np.ndarray:
    """Lengths ``d_h(x, y)`` for every row ``y`` of ``ys`` from a single search.

    No paths are reconstructed.  With ``clip_radius`` the search never enters
    points farther than that from ``x``; lengths are then upper bounds that
    are exact whenever the optimal paths stay inside the ball.
    """
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, index.dim)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_dim(index, x)
    if not h > 0:
        raise PercolipError(f"step size h must be positive, got {h}")
    out = np.full(len(ys), math.inf)
    if index.n_points == 0 or len(ys) == 0:
        return out
    halo = 0.5 * h if halo is None else float(halo)
    dist, _, _, _ = _search(index, x, [], h, halo, clip_radius)
    return _kernels.ball_min(*index.kernel_args(), dist, np.ascontiguousarray(ys), halo)


def graph_distance(points, index: GridIndex, query: PathQuery, *, clip: bool = False) -> DistanceResult:
    """Shortest feasible path length between ``query.x`` and ``query.y``.

    Returns an infinite result with an empty path if no feasible path exists.
    Among equal-length shortest paths the lexicographically smallest index
    sequence is returned.
    """
    return distances_to(points, index, query.x, [query.y], query.h, clip=clip)[0]


def vertex_distances(points, index: GridIndex, source: int, h: float, *,
                     clip_radius: float | None = None, stop_at: float = math.inf):
    """Step-h graph distances from cloud point ``source`` to every point.

    Endpoint halos are zero: both ends are cloud points themselves.
    Returns ``(dist, pred)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not 0 <= source < len(pts):
        raise PercolipError(f"source index {source} out of range")
    center = pts[source]
    r2 = math.inf if clip_radius is None else clip_radius * clip_radius
    sources = neighbors_within(index, center, 0.0)
    dist, pred, _ = _kernels.dijkstra(*index.kernel_args(), sources, float(h),
                                      np.zeros(len(pts), np.int64), 0, center, r2, float(stop_at))
    return dist, pred


def enriched_index(enriched: EnrichedCloud, h: float) -> GridIndex:
    return build_index(enriched.points, h, origin=np.asarray(enriched.grid_origin))


def distance_on_enriched(enriched: EnrichedCloud, query: PathQuery, index: GridIndex | None = None,
                         *, clip: bool = False) -> DistanceResult:
    """Graph distance over base + fill points; requires ``h >= C_d * box_side``."""
    if query.h < enriched.delta * (1.0 - 1e-12):
        raise PercolipError(
            f"h={query.h:.6g} is below the enrichment scale {enriched.delta:.6g}; finiteness is not guaranteed"
        )
    pts = enriched.points
    if index is None:
        index = build_index(pts, query.h, origin=np.asarray(enriched.grid_origin))
    return graph_distance(pts, index, query, clip=clip)


def lower_bound_holds(result: DistanceResult, query: PathQuery) -> bool:
    """``length >= |x - y| - h`` (vacuous for infinite results)."""
    return (not result.finite) or result.length >= query.separation - query.h


def triangle_check(points, index: GridIndex, x, y, z, h1: float, h2: float, h3: float, *,
                   join_slack: bool = False) -> bool:
    """``d_{h3}(x, y) <= d_{h1}(x, z) + d_{h2}(z, y)`` with infinity absorbing.

    Concatenating the two optimal paths needs one extra hop between their
    endpoints near ``z``, of length at most ``(h1 + h2) / 2``.  The plain
    inequality can therefore fail by up to that amount; ``join_slack=True``
    adds it to the right-hand side, which makes the check hold for every
    point set.
    """
    if h3 < max(h1, h2):
        raise PercolipError(f"h3={h3} must be at least max(h1, h2)={max(h1, h2)}")
    d_xz = graph_distance(points, index, PathQuery(x, z, h1)).length
    d_zy = graph_distance(points, index, PathQuery(z, y, h2)).length
    rhs = d_xz + d_zy
    if math.isinf(rhs):
        return True
    if join_slack:
        rhs += 0.5 * (h1 + h2)
    return graph_distance(points, index, PathQuery(x, y, h3)).length <= rhs


def localization_check(result: DistanceResult, points, x, y, cd_prime: float | None = None) -> bool:
    """Every path point lies in the closed ball ``B(x, C_d' |x - y|)``."""
    if not result.finite:
        raise PercolipError("localization is only defined for finite results")
    pts = np.asarray(points, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cdp = c_d_prime(len(x)) if cd_prime is None else cd_prime
    radius = cdp * float(np.linalg.norm(x - y))
    far = np.linalg.norm(pts[list(result.path)] - x, axis=1)
    return bool(np.all(far <= radius))


def distances_match(cloud_points, enriched: EnrichedCloud, query: PathQuery) -> bool:
    """Plain and enriched distances agree exactly (hypothesis ``delta <= h <= |x-y|/2``)."""
    base = np.asarray(cloud_points, dtype=np.float64)
    if base.shape != enriched.base.points.shape or not np.array_equal(base, enriched.base.points):
        raise PercolipError("enriched cloud was not built from this cloud")
    if not (enriched.delta * (1.0 - 1e-12) <= query.h <= query.separation / 2):
        raise PercolipError(
            f"need delta={enriched.delta:.6g} <= h={query.h:.6g} <= |x-y|/2={query.separation / 2:.6g}"
        )
    plain = graph_distance(base, build_index(base, query.h), query)
    rich = distance_on_enriched(enriched, query)
    return plain.length == rich.length


def upper_bound(query: PathQuery) -> float:
    """The almost-sure enriched bound ``C_d |x - y|``."""
    return c_d(len(query.x)) * query.separation
