"""Point processes on boxes, the enriched process and length-scale formulas.

Poisson clouds are the substrate for everything else in the package.  A
cloud is immutable after construction; all sampling is a pure function of
``(domain, parameters, seed)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import PercolipError, SizeError

#: Largest expected number of points we agree to draw in one cloud.
MAX_POINTS = 50_000_000


def c_d(d: int) -> float:
    """Box constant ``2 sqrt(d)``: points in touching boxes of side ``b``
    are at most ``c_d(d) * b`` apart."""
    return 2.0 * math.sqrt(d)


#: Offset used for the localization constant, ``C_d' = C_d + CD_PRIME_OFFSET``.
CD_PRIME_OFFSET = 2.0


def c_d_prime(d: int) -> float:
    """Localization constant; any value above ``1 + c_d(d)`` is admissible."""
    return c_d(d) + CD_PRIME_OFFSET


def make_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(master_seed, *keys)``.

    Streams for different key tuples are statistically independent, so
    trials can be scheduled in any order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def derive_seed(master_seed: int, *keys: int) -> int:
    """A 64-bit seed derived from ``(master_seed, *keys)``."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``[lo, hi]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) == 0 or len(lo) != len(hi):
            raise PercolipError(f"domain corners must have equal positive length, got {lo} and {hi}")
        if not all(math.isfinite(v) for v in lo + hi):
            raise PercolipError("domain corners must be finite")
        for axis, (a, b) in enumerate(zip(lo, hi)):
            if not b > a:
                raise PercolipError(f"domain axis {axis}: hi={b} must exceed lo={a}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit(cls, d: int) -> "BoxDomain":
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=1)

    def distance_to_boundary(self, pts: np.ndarray) -> np.ndarray:
        """Distance of interior points to the box boundary."""
        pts = np.atleast_2d(pts)
        return np.minimum(pts - np.asarray(self.lo), np.asarray(self.hi) - pts).min(axis=1)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.sides))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def strip_domain(s: float, d: int) -> BoxDomain:
    """The experiment domain ``[-s^(1/d), s + s^(1/d)] x [-s^(1/d), s^(1/d)]^(d-1)``."""
    w = s ** (1.0 / d)
    return BoxDomain((-w,) * d, (s + w,) + (w,) * (d - 1))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A finite point set in a box; ``points`` has shape ``(k, dim)``."""

    points: np.ndarray
    domain: BoxDomain
    seed: int = 0
    dim: int = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        d = self.domain.dim
        if pts.size == 0:
            pts = np.empty((0, d))
        if pts.ndim != 2 or pts.shape[1] != d:
            raise PercolipError(f"points must have shape (k, {d}), got {pts.shape}")
        if not np.all(self.domain.contains(pts)):
            raise PercolipError("cloud has points outside its domain")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", d)

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(self.dim)])
        for p in self.points:
            w.writerow([repr(float(v)) for v in p])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, domain: BoxDomain | None = None) -> "PointCloud":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise PercolipError("empty CSV")
        header, body = rows[0], [r for r in rows[1:] if r]
        d = len(header)
        if header != [f"x{i + 1}" for i in range(d)]:
            raise PercolipError(f"CSV header must be x1..xd, got {header}")
        pts = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, d)
        if domain is None:
            if len(pts) == 0:
                raise PercolipError("cannot infer a domain from an empty CSV")
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            hi = np.where(hi > lo, hi, lo + 1.0)
            domain = BoxDomain(tuple(lo), tuple(hi))
        return cls(pts, domain)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dim": self.dim,
                "domain": self.domain.to_dict(),
                "seed": int(self.seed),
                "points": self.points.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PointCloud":
        obj = json.loads(text)
        dom = BoxDomain(tuple(obj["domain"]["lo"]), tuple(obj["domain"]["hi"]))
        pts = np.asarray(obj["points"], dtype=float).reshape(-1, int(obj["dim"]))
        return cls(pts, dom, int(obj.get("seed", 0)))


def _uniform_points(domain: BoxDomain, k: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.asarray(domain.lo)
    pts = lo + domain.sides * rng.random((k, domain.dim))
    # sort along the first axis: memory locality for grid scans and a
    # sweep order that follows the geometry; the set itself is unchanged
    return pts[np.argsort(pts[:, 0], kind="stable")]


def sample_poisson(domain: BoxDomain, intensity: float, seed: int) -> PointCloud:
    """Homogeneous Poisson process with the given intensity on ``domain``.

    The count is Poisson with mean ``intensity * |domain|``; given the count
    the points are i.i.d. uniform.  The returned points are ordered by their
    first coordinate.
    """
    if not intensity >= 0 or not math.isfinite(intensity):
        raise PercolipError(f"intensity must be finite and >= 0, got {intensity}")
    mean = intensity * domain.volume()
    if not math.isfinite(mean) or mean > MAX_POINTS:
        raise SizeError(f"expected point count {mean:.3g} exceeds the limit {MAX_POINTS}")
    rng = np.random.default_rng(int(seed))
    k = int(rng.poisson(mean)) if mean > 0 else 0
    return PointCloud(_uniform_points(domain, k, rng), domain, int(seed))


def sample_binomial(domain: BoxDomain, n: int, seed: int) -> PointCloud:
    """Exactly ``n`` i.i.d. uniform points on ``domain``."""
    if int(n) != n or n < 0:
        raise PercolipError(f"n must be a non-negative integer, got {n}")
    if n > MAX_POINTS:
        raise SizeError(f"n={n} exceeds the limit {MAX_POINTS}")
    rng = np.random.default_rng(int(seed))
    return PointCloud(_uniform_points(domain, int(n), rng), domain, int(seed))


@dataclass(frozen=True, eq=False)
class EnrichedCloud:
    """A cloud plus one fill point per empty box of a grid of side ``box_side``.

    Point indices of ``points`` are the base points followed by ``added``.
    """

    base: PointCloud
    box_side: float
    added: np.ndarray
    grid_origin: tuple[float, ...]

    @cached_property
    def points(self) -> np.ndarray:
        if not len(self.added):
            return self.base.points
        pts = np.vstack([self.base.points, self.added])
        pts.setflags(write=False)
        return pts

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def delta(self) -> float:
        """Smallest step size for which the enrichment guarantees finite distances."""
        return c_d(self.dim) * self.box_side

    def flattened(self) -> PointCloud:
        return PointCloud(self.points, self.base.domain, self.base.seed)

    def __len__(self) -> int:
        return len(self.base) + len(self.added)


def box_grid_shape(domain: BoxDomain, box_side: float) -> np.ndarray:
    """Boxes per axis when tiling ``domain`` from ``lo`` with side ``box_side``."""
    return np.maximum(np.ceil(domain.sides / box_side).astype(np.int64), 1)


def box_occupancy(points: np.ndarray, domain: BoxDomain, box_side: float) -> np.ndarray:
    """Boolean occupancy array of the box grid anchored at ``domain.lo``."""
    shape = box_grid_shape(domain, box_side)
    occ = np.zeros(tuple(shape), dtype=bool)
    if len(points):
        cells = np.floor((points - np.asarray(domain.lo)) / box_side).astype(np.int64)
        cells = np.clip(cells, 0, shape - 1)
        occ[tuple(cells.T)] = True
    return occ


def enrich(cloud: PointCloud, delta: float) -> EnrichedCloud:
    """Fill every empty box of side ``delta / c_d`` with its center.

    Boxes tile the domain starting at ``domain.lo``; boxes on the far faces
    are clipped to the domain and receive the center of the clipped box.
    """
    if not delta > 0 or not math.isfinite(delta):
        raise PercolipError(f"delta must be positive and finite, got {delta}")
    dom = cloud.domain
    side = delta / c_d(cloud.dim)
    if np.all(side > dom.sides):
        raise PercolipError(
            f"box side {side:.4g} exceeds every domain side {dom.sides.tolist()}; the grid is degenerate"
        )
    shape = box_grid_shape(dom, side)
    n_boxes = int(np.prod(shape))
    if n_boxes > MAX_POINTS:
        raise SizeError(f"enrichment grid has {n_boxes} boxes, more than {MAX_POINTS}")
    occ = box_occupancy(cloud.points, dom, side)
    empty = np.argwhere(~occ)
    lo = np.asarray(dom.lo)
    hi = np.asarray(dom.hi)
    box_lo = lo + empty * side
    box_hi = np.minimum(box_lo + side, hi)
    added = 0.5 * (box_lo + box_hi)
    return EnrichedCloud(cloud, float(side), added.reshape(-1, cloud.dim), tuple(dom.lo))


def delta_s(s: float, k: float, d: int, cd_prime: float | None = None) -> float:
    """Box scale ``C_d (k log(2 C_d C_d' s))^(1/d)`` (natural log)."""
    if not s > 1:
        raise PercolipError(f"delta_s needs s > 1, got {s}")
    if not k > 0:
        raise PercolipError(f"k must be positive, got {k}")
    cd = c_d(d)
    cdp = c_d_prime(d) if cd_prime is None else cd_prime
    arg = 2.0 * cd * cdp * s
    if not arg > 1:
        raise PercolipError(f"log argument {arg} must exceed 1")
    return cd * (k * math.log(arg)) ** (1.0 / d)


def h_scaling(s: float, a: float, d: int) -> float:
    """Step size ``a log(s)^(1/d)`` (natural log)."""
    if not s > 1:
        raise PercolipError(f"h_scaling needs s > 1, got {s}")
    if not a > 0:
        raise PercolipError(f"a must be positive, got {a}")
    return a * math.log(s) ** (1.0 / d)


def as_points(pts: Sequence[Sequence[float]] | np.ndarray | PointCloud | EnrichedCloud) -> np.ndarray:
    """Coerce any supported point container to a float ``(k, d)`` array."""
    if isinstance(pts, (PointCloud, EnrichedCloud)):
        return pts.points
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        raise PercolipError("cannot infer the dimension of an empty point list")
    return arr.reshape(len(arr), -1)
