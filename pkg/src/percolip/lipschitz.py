"""Lipschitz learning on random geometric graphs.

A :class:`GeometricGraph` joins the points of a cloud that are at most
``eps`` apart.  Vertices within ``eps`` of the domain boundary carry the
labels; the graph infinity-Laplace equation

    max_j (u_j - u_i) / |p_j - p_i| + min_j (u_j - u_i) / |p_j - p_i| = 0

is solved at every other vertex by Gauss-Seidel sweeps of its exact local
root.  The module also provides the comparison-with-cones certificate, the
sup/inf extensions over continuum balls, a sampled nonlocal infinity
Laplacian and the ``r_tau`` homogenization diagnostic.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import qmc

from . import _kernels
from .errors import ConvergenceError, DisconnectedError, PercolipError
from .fpp import distances_to_many, vertex_distances
from .pointcloud import (
    BoxDomain,
    PointCloud,
    c_d_prime,
    derive_seed,
    enrich,
    sample_binomial,
    sample_poisson,
)
from .spatial import GridIndex, build_index, neighbors_within

DEFAULT_TOL = 1e-8


def eps_to_h(n: float, eps: float, d: int) -> float:
    """Unit-intensity step size ``h = n^(1/d) eps`` for bandwidth ``eps`` at intensity ``n``."""
    if not n > 0:
        raise PercolipError(f"intensity must be positive, got {n}")
    return n ** (1.0 / d) * eps


def h_to_eps(n: float, h: float, d: int) -> float:
    """Inverse of :func:`eps_to_h`."""
    if not n > 0:
        raise PercolipError(f"intensity must be positive, got {n}")
    return h / n ** (1.0 / d)


def connectivity_eps(n: float, d: int, c: float = 2.5) -> float:
    """Bandwidth ``c (ln n / n)^(1/d)`` a constant factor above the connectivity threshold."""
    if not n > 1:
        raise PercolipError(f"need n > 1, got {n}")
    return c * (math.log(n) / n) ** (1.0 / d)


# --- graphs -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GeometricGraph:
    """Closed ``eps``-ball graph on a cloud, with boundary vertex flags.

    Adjacency is CSR: the neighbors of ``i`` are
    ``indices[indptr[i]:indptr[i+1]]`` (ascending) at Euclidean distances
    ``weights[...]``.
    """

    cloud: PointCloud
    eps: float
    index: GridIndex
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    boundary_mask: np.ndarray
    boundary_width: float
    warnings: tuple[str, ...] = ()

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def n_vertices(self) -> int:
        return len(self.cloud.points)

    @property
    def dim(self) -> int:
        return self.cloud.dim

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def stranded(self) -> np.ndarray:
        """Interior vertices with no ``eps``-path to a boundary vertex."""
        n = self.n_vertices
        if n == 0:
            return np.empty(0, np.int64)
        adj = csr_matrix((np.ones(len(self.indices)), self.indices, self.indptr), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        ok = np.zeros(labels.max() + 1, bool)
        ok[labels[self.boundary_mask]] = True
        return np.flatnonzero(~ok[labels])


def graph_from_cloud(cloud: PointCloud, eps: float, boundary_width: float | None = None) -> GeometricGraph:
    """Build the ``eps``-graph of ``cloud``; boundary vertices are those within
    ``boundary_width`` (default ``eps``) of the domain boundary."""
    if not eps > 0 or not math.isfinite(eps):
        raise PercolipError(f"eps must be positive and finite, got {eps}")
    width = float(eps if boundary_width is None else boundary_width)
    if not width >= 0:
        raise PercolipError(f"boundary width must be non-negative, got {width}")
    pts = cloud.points
    index = build_index(pts, eps, origin=np.asarray(cloud.domain.lo))
    if len(pts):
        indptr, indices, weights = _kernels.radius_graph(*index.kernel_args(), float(eps))
    else:
        indptr, indices, weights = np.zeros(1, np.int64), np.empty(0, np.int64), np.empty(0)
    mask = cloud.domain.distance_to_boundary(pts) <= width
    if len(pts) and not mask.any():
        raise PercolipError(
            f"no vertex lies within {width:.4g} of the boundary; the labeled set is empty "
            f"(n={len(pts)}, seed={cloud.seed}); use a larger cloud, eps or another seed"
        )
    graph = GeometricGraph(cloud, float(eps), index, indptr, indices, weights, mask, width)
    warnings = ()
    if len(graph.stranded):
        warnings = (f"{len(graph.stranded)} interior vertices are not eps-connected to the boundary",)
    object.__setattr__(graph, "warnings", warnings)
    return graph


def build_graph(domain: BoxDomain, n: float, eps: float, seed: int, *,
                boundary_width: float | None = None, process: str = "poisson") -> GeometricGraph:
    """Sample a cloud of intensity ``n`` on ``domain`` and build its ``eps``-graph.

    ``process="binomial"`` draws exactly ``round(n |domain|)`` i.i.d. points instead.
    """
    if process == "poisson":
        cloud = sample_poisson(domain, n, seed)
    elif process == "binomial":
        cloud = sample_binomial(domain, int(round(n * domain.volume())), seed)
    else:
        raise PercolipError(f"unknown point process {process!r}")
    return graph_from_cloud(cloud, eps, boundary_width)


def inf_laplacian_at(u, graph: GeometricGraph, i: int) -> float:
    """Largest plus smallest difference quotient at vertex ``i``."""
    nb = graph.neighbors(i)
    if len(nb) == 0:
        raise PercolipError(f"vertex {i} has no neighbors")
    u = np.asarray(u, dtype=float)
    q = (u[nb] - u[i]) / graph.weights[graph.indptr[i]:graph.indptr[i + 1]]
    return float(q.max() + q.min())


def graph_boundary(graph: GeometricGraph, subset) -> np.ndarray:
    """Vertices outside ``subset`` with a neighbor inside it, ascending."""
    inside = np.zeros(graph.n_vertices, bool)
    inside[np.asarray(subset, dtype=np.int64)] = True
    hit = np.zeros(graph.n_vertices, bool)
    for i in np.flatnonzero(inside):
        hit[graph.neighbors(i)] = True
    return np.flatnonzero(hit & ~inside)


def graph_closure(graph: GeometricGraph, subset) -> np.ndarray:
    return np.union1d(np.asarray(subset, dtype=np.int64), graph_boundary(graph, subset))


# --- labeling problems and the solver -------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelProblem:
    """Dirichlet data ``g[k]`` for the vertex ``graph.boundary[k]``."""

    graph: GeometricGraph
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.graph.n_vertices and len(self.graph.boundary) == 0:
            raise PercolipError("the graph has no boundary vertices")
        if len(g) != len(self.graph.boundary):
            raise PercolipError(f"need {len(self.graph.boundary)} boundary values, got {len(g)}")
        if not np.all(np.isfinite(g)):
            raise PercolipError("boundary values must be finite")
        object.__setattr__(self, "g", g)

    @classmethod
    def from_function(cls, graph: GeometricGraph, f: Callable[[np.ndarray], np.ndarray]) -> "LabelProblem":
        """Boundary values sampled from ``f``, which maps a ``(k, d)`` array to ``k`` values."""
        pts = graph.points[graph.boundary]
        return cls(graph, np.asarray(f(pts), dtype=float).reshape(len(pts)))


@dataclass(frozen=True, eq=False)
class Solution:
    u: np.ndarray
    iterations: int
    max_residual: float
    converged: bool
    tol: float = DEFAULT_TOL


def default_max_sweeps(n_vertices: int, d: int) -> int:
    return int(1000 * max(n_vertices, 1) ** (1.0 / d))


def solve(problem: LabelProblem, tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
          init: np.ndarray | None = None) -> Solution:
    """Gauss-Seidel solution of the graph infinity-Laplace equation.

    Interior vertices start at ``min g`` unless ``init`` is given and are
    swept in index order; each update is the exact root of the local
    equation.  Stops once the interior residual is below ``tol`` or after
    ``max_sweeps`` sweeps; ``converged`` says which.
    """
    if not tol > 0:
        raise PercolipError(f"tol must be positive, got {tol}")
    graph = problem.graph
    n = graph.n_vertices
    u = np.empty(n)
    if n == 0:
        return Solution(u, 0, 0.0, True, tol)
    if len(graph.stranded):
        raise DisconnectedError(
            f"{len(graph.stranded)} interior vertices are not eps-connected to the boundary "
            f"(first: {graph.stranded[:5].tolist()})"
        )
    if max_sweeps is None:
        max_sweeps = default_max_sweeps(n, graph.dim)
    interior = graph.interior
    if init is None:
        u[interior] = problem.g.min()
    else:
        u[:] = np.asarray(init, dtype=float)
    u[graph.boundary] = problem.g
    sweeps, res = _kernels.gauss_seidel(u, interior, graph.indptr, graph.indices, graph.weights,
                                        float(tol), int(max_sweeps))
    u.setflags(write=False)
    return Solution(u, int(sweeps), float(res), bool(res < tol), tol)


def residual_post_pass(solution: Solution, graph: GeometricGraph) -> float:
    """Interior residual recomputed vertex by vertex with :func:`inf_laplacian_at`."""
    return max((abs(inf_laplacian_at(solution.u, graph, i)) for i in graph.interior), default=0.0)


def max_principle_margin(solution: Solution, problem: LabelProblem) -> float:
    """``min(u - min g, max g - u)`` over all vertices; negative means violated."""
    if problem.graph.n_vertices == 0:
        return math.inf
    u = solution.u
    return float(min((u - problem.g.min()).min(), (problem.g.max() - u).min()))


def cone_comparison_check(solution: Solution, graph: GeometricGraph, subset, a: float, z: int) -> bool:
    """Extrema of ``u - a d_eps(., z)`` over the closure of ``subset`` are attained on its boundary.

    ``d_eps`` is the vertex-to-vertex graph distance with step ``eps``.
    """
    subset = np.unique(np.asarray(subset, dtype=np.int64))
    if not a >= 0:
        raise PercolipError(f"cone slope must be non-negative, got {a}")
    if z in set(subset.tolist()):
        raise PercolipError("the cone apex must lie outside the subset")
    closure = graph_closure(graph, subset)
    bd = graph_boundary(graph, subset)
    dist, _ = vertex_distances(graph.points, graph.index, int(z), graph.eps)
    if not np.all(np.isfinite(dist[closure])):
        raise DisconnectedError("the cone apex is not eps-connected to the whole closure")
    if len(bd) == 0:
        return False
    v = solution.u - a * dist
    return bool(v[closure].max() == v[bd].max() and v[closure].min() == v[bd].min())


# --- continuum extensions -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HomogenizedView:
    """Sup and inf of the vertex values over closed continuum balls of radius ``tau``."""

    graph: GeometricGraph
    u: np.ndarray
    tau: float

    def _ball(self, x) -> np.ndarray:
        nb = neighbors_within(self.graph.index, x, self.tau)
        if len(nb) == 0:
            raise PercolipError(f"no vertex within tau={self.tau:.4g} of {np.asarray(x).tolist()}")
        return nb

    def u_sup(self, x) -> float:
        return float(self.u[self._ball(x)].max())

    def u_inf(self, x) -> float:
        return float(self.u[self._ball(x)].min())


def extend(solution: Solution, graph: GeometricGraph, tau: float) -> HomogenizedView:
    if not tau > 0:
        raise PercolipError(f"tau must be positive, got {tau}")
    return HomogenizedView(graph, solution.u, float(tau))


def ball_samples(d: int, m: int = 4096, seed: int = 0) -> np.ndarray:
    """Unit-ball sample set: the center, the ``2d`` axis points, Sobol points
    inside the ball and antipodal pairs on the sphere."""
    sob = qmc.Sobol(d, scramble=True, seed=seed).random(m)
    cube = 2.0 * sob - 1.0
    norms = np.linalg.norm(cube, axis=1)
    inner = cube[norms <= 1.0]
    dirs = cube[norms > 0] / norms[norms > 0, None]
    axes = np.vstack([np.eye(d), -np.eye(d)])
    return np.vstack([np.zeros((1, d)), axes, inner, dirs, -dirs])


def nonlocal_inf_laplacian(f: Callable[[np.ndarray], np.ndarray], tau: float, x, *,
                           domain: BoxDomain | None = None, m: int = 4096, seed: int = 0) -> float:
    """``(sup_B f - 2 f(x) + inf_B f) / tau^2`` over ``B = B(x, tau)``, extrema sampled.

    With ``domain`` given, ``x`` must be at least ``tau`` inside it.
    """
    if not tau > 0:
        raise PercolipError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=float).reshape(-1)
    if domain is not None and domain.distance_to_boundary(x[None])[0] < tau:
        raise PercolipError("B(x, tau) leaves the domain")
    pts = x + tau * ball_samples(len(x), m, seed)
    vals = np.asarray(f(pts), dtype=float).reshape(len(pts))
    return float((vals.max() - 2.0 * vals[0] + vals.min()) / (tau * tau))


# --- the r_tau diagnostic -------------------------------------------------------


@dataclass(frozen=True)
class RTau:
    d_bar: float
    d_under: float
    r: float


def r_tau_from_metric(points, x0, eps: float, tau: float,
                      metric: Callable[[np.ndarray], np.ndarray],
                      reach: float | None = None) -> RTau:
    """``r = d_bar / d_under - 1/2`` for distances ``metric(ys)`` from ``x0``.

    ``d_bar`` is the largest distance to a point of the closed ball
    ``B(x0, tau)``; ``d_under`` the smallest distance to a point outside
    ``B(x0, 2 tau - 2 eps)`` (and within ``reach`` if given).
    """
    if not 2 * eps <= tau:
        raise PercolipError(f"need 2 eps <= tau, got eps={eps}, tau={tau}")
    pts = np.asarray(points, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    r = np.linalg.norm(pts - x0, axis=1)
    ball = pts[r <= tau]
    far = (r > 2 * tau - 2 * eps)
    if reach is not None:
        far &= r <= reach
    outside = pts[far]
    if len(ball) == 0:
        raise PercolipError("B(x0, tau) contains no cloud point")
    if len(outside) == 0:
        raise PercolipError("no cloud point outside B(x0, 2 tau - 2 eps) within reach")
    d_bar = float(np.max(metric(ball)))
    d_under = float(np.min(metric(outside)))
    if not (math.isfinite(d_bar) and math.isfinite(d_under)) or d_under <= 0:
        raise DisconnectedError("distances in the r_tau diagnostic must be finite and positive")
    return RTau(d_bar, d_under, d_bar / d_under - 0.5)


def r_tau_diagnostic(cloud: PointCloud, x0, eps: float, tau: float, delta: float | None = None) -> RTau:
    """``r_tau(x0)`` with enriched step-``eps`` graph distances.

    The cloud is enriched with box scale ``delta`` (default ``eps``, the
    largest value keeping every distance finite).  Requires
    ``dist(x0, boundary) >= 3 tau``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if cloud.domain.distance_to_boundary(x0[None])[0] < 3 * tau:
        raise PercolipError("x0 must be at least 3 tau away from the boundary")
    delta = eps if delta is None else float(delta)
    if delta > eps:
        raise PercolipError(f"enrichment scale {delta} exceeds eps={eps}; distances may be infinite")
    rich = enrich(cloud, delta)
    pts = rich.points
    index = build_index(pts, eps, origin=np.asarray(cloud.domain.lo))
    reach = c_d_prime(cloud.dim) * 2 * tau

    def metric(ys):
        return distances_to_many(pts, index, x0, ys, eps, clip_radius=reach + eps)

    return r_tau_from_metric(cloud.points, x0, eps, tau, metric, reach=reach)


# --- boundary data and convergence studies -------------------------------------


@dataclass(frozen=True)
class BoundaryData:
    """Affine ``c . x + b`` or cone ``scale |x - apex|`` data; both are their own
    infinity-harmonic extension (the cone away from its apex)."""

    kind: str
    params: tuple

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "affine":
            coeffs, offset = self.params
            return pts @ np.asarray(coeffs, dtype=float) + float(offset)
        if self.kind == "cone":
            apex, scale = self.params
            return float(scale) * np.linalg.norm(pts - np.asarray(apex, dtype=float), axis=1)
        raise PercolipError(f"unknown boundary data kind {self.kind!r}")

    @classmethod
    def affine(cls, coeffs: Sequence[float], offset: float = 0.0) -> "BoundaryData":
        return cls("affine", (tuple(float(c) for c in coeffs), float(offset)))

    @classmethod
    def cone(cls, apex: Sequence[float], scale: float = 1.0) -> "BoundaryData":
        return cls("cone", (tuple(float(c) for c in apex), float(scale)))


@dataclass(frozen=True)
class ConvergenceRecord:
    n: float
    trial: int
    eps: float
    n_vertices: int
    sup_error: float
    residual: float
    sweeps: int
    converged: bool
    wall_time_ms: float | None = field(default=None, compare=False)


def convergence_trial(domain: BoxDomain, g: Callable, exact: Callable, n: float, eps: float,
                      seed: int, tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
                      trial: int = 0) -> ConvergenceRecord:
    start = time.perf_counter()
    graph = build_graph(domain, n, eps, seed)
    problem = LabelProblem.from_function(graph, g)
    sol = solve(problem, tol, max_sweeps)
    err = float(np.max(np.abs(sol.u - exact(graph.points)))) if graph.n_vertices else 0.0
    return ConvergenceRecord(n, trial, eps, graph.n_vertices, err, sol.max_residual, sol.iterations,
                             sol.converged, (time.perf_counter() - start) * 1e3)


def convergence_study(domain: BoxDomain, g: Callable, exact: Callable, n_list: Sequence[float],
                      eps_rule: Callable[[float], float], trials: int, seed: int, *,
                      tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
                      threads: int = 1) -> list[ConvergenceRecord]:
    """Sup-norm errors against ``exact`` for every ``(n, trial)``, sorted by key.

    Trial ``k`` at intensity ``n`` uses the seed derived from ``(seed, n, k)``.
    """
    if trials < 1:
        raise PercolipError(f"trials must be >= 1, got {trials}")
    tasks = [(float(n), k) for n in n_list for k in range(trials)]

    def work(task):
        n, k = task
        try:
            return convergence_trial(domain, g, exact, n, eps_rule(n), derive_seed(seed, int(n), k),
                                     tol, max_sweeps, k)
        except PercolipError as exc:
            raise type(exc)(f"n {n:g}, trial {k}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(work, tasks))
    else:
        out = [work(t) for t in tasks]
    return sorted(out, key=lambda r: (r.n, r.trial))


def median_errors(records: Sequence[ConvergenceRecord]) -> dict[float, dict]:
    """Per ``n``: median sup error over converged trials and the failure count."""
    out = {}
    for n in sorted({r.n for r in records}):
        rows = [r for r in records if r.n == n]
        ok = [r.sup_error for r in rows if r.converged]
        out[n] = {
            "median_error": float(np.median(ok)) if ok else math.nan,
            "converged": len(ok),
            "failed": len(rows) - len(ok),
        }
    return out


def require_converged(solution: Solution) -> Solution:
    if not solution.converged:
        raise ConvergenceError(
            f"residual {solution.max_residual:.3g} above tol {solution.tol:.3g} after {solution.iterations} sweeps"
        )
    return solution
