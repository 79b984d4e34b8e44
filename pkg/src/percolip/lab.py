"""Monte-Carlo first-passage experiments on strip domains.

A study runs ``K`` independent trials at each level ``s_i = s0 * 2**i``.  Each
trial samples a unit-intensity Poisson cloud on the strip
``[-s^(1/d), s + s^(1/d)] x [-s^(1/d), s^(1/d)]^(d-1)`` and measures the
step-``h_s`` distances from the origin to ``s e_1`` and ``(s/2) e_1``, plus
optionally the distance to ``s e_1`` on the enriched cloud.  Every trial owns
the random stream ``(master_seed, level, trial)``, so results do not depend
on scheduling.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import PercolipError
from .fpp import distances_to
from .pointcloud import c_d, delta_s, derive_seed, enrich, h_scaling, sample_poisson, strip_domain
from .spatial import build_index

RECORD_COLUMNS = ("level", "trial", "s", "h", "T_full", "T_half", "T_prime", "hops", "wall_time_ms")


@dataclass(frozen=True)
class StudyConfig:
    d: int = 2
    i_max: int = 5
    a: float = 2.0
    K: int = 100
    k_enrich: float | None = None
    master_seed: int = 0
    s0: float = 100.0
    clip: bool = True

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise PercolipError(f"d must be a positive integer, got {self.d}")
        if int(self.i_max) != self.i_max or self.i_max < 1:
            raise PercolipError(f"i_max must be an integer >= 1, got {self.i_max}")
        if int(self.K) != self.K or self.K < 1:
            raise PercolipError(f"K must be an integer >= 1, got {self.K}")
        if not self.a > 0:
            raise PercolipError(f"a must be positive, got {self.a}")
        if self.k_enrich is not None and not self.k_enrich > 0:
            raise PercolipError(f"k_enrich must be positive or None, got {self.k_enrich}")
        if not self.s0 * 2 > 1:
            raise PercolipError(f"s0 must make every level exceed 1, got {self.s0}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise PercolipError("master_seed must be a 64-bit unsigned integer")

    @property
    def levels(self) -> range:
        return range(1, self.i_max + 1)

    def s(self, level: int) -> float:
        return float(self.s0) * 2.0**level

    def h(self, level: int) -> float:
        return h_scaling(self.s(level), self.a, self.d)

    def delta(self, level: int) -> float | None:
        if self.k_enrich is None:
            return None
        return delta_s(self.s(level), self.k_enrich, self.d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrialRecord:
    """One trial.  ``T_prime`` is None when enrichment is off or unavailable
    (``h_s < delta_s``); ``hops`` belongs to the ``T_full`` path."""

    level: int
    trial: int
    s: float
    h: float
    T_full: float
    T_half: float
    T_prime: float | None = None
    hops: int | None = None
    wall_time_ms: float | None = field(default=None, compare=False)


def run_trial(config: StudyConfig, level: int, trial: int) -> TrialRecord:
    start = time.perf_counter()
    d = config.d
    s = config.s(level)
    h = config.h(level)
    dom = strip_domain(s, d)
    cloud = sample_poisson(dom, 1.0, derive_seed(config.master_seed, level, trial))
    origin = np.zeros(d)
    full = np.zeros(d)
    full[0] = s
    half = np.zeros(d)
    half[0] = s / 2
    index = build_index(cloud.points, h / 2, origin=np.asarray(dom.lo))
    r_full, r_half = distances_to(cloud.points, index, origin, [full, half], h, clip=config.clip)

    t_prime = None
    delta = config.delta(level)
    if delta is not None and h >= delta:
        enriched = enrich(cloud, delta)
        if len(enriched.added) == 0:
            t_prime = r_full.length
        else:
            pts = enriched.points
            e_index = build_index(pts, h / 2, origin=np.asarray(dom.lo))
            t_prime = distances_to(pts, e_index, origin, [full], h, clip=config.clip)[0].length

    return TrialRecord(
        level=level,
        trial=trial,
        s=s,
        h=h,
        T_full=r_full.length,
        T_half=r_half.length,
        T_prime=t_prime,
        hops=r_full.hops if r_full.finite else None,
        wall_time_ms=(time.perf_counter() - start) * 1e3,
    )


def run_study(config: StudyConfig, threads: int = 1,
              progress: Callable[[TrialRecord], None] | None = None) -> list[TrialRecord]:
    """All trials of ``config``, sorted by ``(level, trial)``.

    Trials run on a pool of ``threads`` workers; the search kernels release
    the GIL.  The output is identical for every thread count.
    """
    if threads < 1:
        raise PercolipError(f"threads must be >= 1, got {threads}")
    # largest levels first for better load balance
    tasks = [(i, k) for i in reversed(config.levels) for k in range(config.K)]

    def work(task):
        try:
            rec = run_trial(config, *task)
        except PercolipError as exc:
            raise type(exc)(f"level {task[0]}, trial {task[1]}: {exc}") from exc
        if progress is not None:
            progress(rec)
        return rec

    if threads == 1:
        records = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, tasks))
    return sorted(records, key=lambda r: (r.level, r.trial))


# --- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class ColumnStats:
    mean: float
    std: float
    n_finite: int
    infeasible: int

    @classmethod
    def of(cls, values: Sequence[float | None]) -> "ColumnStats":
        vals = np.array([v for v in values if v is not None], dtype=float)
        fin = vals[np.isfinite(vals)]
        mean = float(fin.mean()) if len(fin) else math.nan
        std = float(fin.std(ddof=1)) if len(fin) > 1 else math.nan
        return cls(mean, std, int(len(fin)), int(len(vals) - len(fin)))

    @property
    def sem(self) -> float:
        return self.std / math.sqrt(self.n_finite) if self.n_finite > 1 else math.nan


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float


@dataclass(frozen=True)
class LevelSummary:
    level: int
    s: float
    h: float
    delta: float | None
    n_trials: int
    T_full: ColumnStats
    T_half: ColumnStats
    T_prime: ColumnStats | None
    ratio: float | None
    scaled_std: float | None


@dataclass(frozen=True)
class StudySummary:
    config: StudyConfig
    levels: tuple[LevelSummary, ...]
    sigma_hat: float | None
    sigma_hat_prime: float | None
    ratio_fit: RateFit | None

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _by_level(records: Iterable[TrialRecord]) -> dict[int, list[TrialRecord]]:
    out: dict[int, list[TrialRecord]] = {}
    for r in records:
        out.setdefault(r.level, []).append(r)
    return dict(sorted(out.items()))


def sigma_estimate(records: Sequence[TrialRecord], column: str = "T_full") -> float:
    """Mean of ``column`` over finite trials at the largest level, divided by s."""
    if not records:
        raise PercolipError("no records")
    top = max(r.level for r in records)
    rows = [r for r in records if r.level == top]
    st = ColumnStats.of([getattr(r, column) for r in rows])
    if st.n_finite == 0:
        raise PercolipError(f"every {column} trial at level {top} is infeasible")
    return st.mean / rows[0].s


def ratio_of_means(t_half_mean: float, t_full_mean: float) -> float:
    if not (math.isfinite(t_half_mean) and math.isfinite(t_full_mean)):
        raise PercolipError("ratio needs finite means")
    if t_full_mean == 0:
        raise PercolipError("zero denominator in ratio")
    return t_half_mean / t_full_mean


def ratio_series(records: Sequence[TrialRecord]) -> dict[int, float]:
    """Per level, mean T_half over mean T_full (each over its finite trials)."""
    out = {}
    for level, rows in _by_level(records).items():
        half = ColumnStats.of([r.T_half for r in rows])
        full = ColumnStats.of([r.T_full for r in rows])
        out[level] = ratio_of_means(half.mean, full.mean)
    return out


def rate_fit(xs: Sequence[float], ys: Sequence[float]) -> RateFit:
    """Least-squares line through ``(ln x, ln y)``; residual is the RMS misfit."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or len(x) < 2:
        raise PercolipError("rate_fit needs at least two (x, y) pairs of equal length")
    if np.any(y <= 0) or np.any(x <= 0):
        raise PercolipError("rate_fit needs positive x and y")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return RateFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


def concentration_scale(s: float, h: float, delta: float) -> float:
    return math.sqrt(delta * delta / h * s)


def concentration_stats(records: Sequence[TrialRecord], delta: float) -> float:
    """Sample std of T_prime at one level divided by ``sqrt(delta^2 / h * s)``."""
    levels = {r.level for r in records}
    if len(levels) != 1:
        raise PercolipError("concentration_stats needs records from exactly one level")
    vals = [r.T_prime for r in records]
    if all(v is None for v in vals):
        raise PercolipError("no enriched distances at this level")
    st = ColumnStats.of(vals)
    if st.n_finite < 2:
        raise PercolipError("need at least two finite T_prime values")
    return st.std / concentration_scale(records[0].s, records[0].h, delta)


def summarize(records: Sequence[TrialRecord], config: StudyConfig) -> StudySummary:
    levels = []
    for level, rows in _by_level(records).items():
        full = ColumnStats.of([r.T_full for r in rows])
        half = ColumnStats.of([r.T_half for r in rows])
        delta = config.delta(level)
        has_prime = any(r.T_prime is not None for r in rows)
        prime = ColumnStats.of([r.T_prime for r in rows]) if has_prime else None
        try:
            ratio = ratio_of_means(half.mean, full.mean)
        except PercolipError:
            ratio = None
        scaled = None
        if prime is not None and prime.n_finite > 1:
            scaled = concentration_stats(rows, delta)
        levels.append(LevelSummary(level, rows[0].s, rows[0].h, delta, len(rows), full, half, prime,
                                   ratio, scaled))

    def sigma(column):
        try:
            return sigma_estimate(records, column)
        except PercolipError:
            return None

    fit = None
    pairs = [(lv.s, abs(lv.ratio - 0.5)) for lv in levels if lv.ratio is not None]
    if len(pairs) >= 2 and all(e > 0 for _, e in pairs):
        fit = rate_fit(*zip(*pairs))
    has_prime = any(r.T_prime is not None for r in records)
    return StudySummary(config, tuple(levels), sigma("T_full"),
                        sigma("T_prime") if has_prime else None, fit)


# --- serialization ------------------------------------------------------------


def format_value(v) -> str:
    """Shortest round-trip text; ``inf`` for infinity, empty for missing."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _parse(v: str, kind):
    if v == "":
        return None
    return kind(v)


def records_to_csv(records: Sequence[TrialRecord], record_timing: bool = False) -> str:
    """CSV text of ``records``.  Wall times are left blank unless requested,
    so that data files are byte-identical across runs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        row = asdict(r)
        if not record_timing:
            row["wall_time_ms"] = None
        w.writerow([format_value(row[c]) for c in RECORD_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[TrialRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        if tuple(row) != RECORD_COLUMNS:
            raise PercolipError(f"unexpected columns {list(row)}")
        out.append(TrialRecord(
            level=int(row["level"]), trial=int(row["trial"]), s=float(row["s"]), h=float(row["h"]),
            T_full=float(row["T_full"]), T_half=float(row["T_half"]),
            T_prime=_parse(row["T_prime"], float), hops=_parse(row["hops"], int),
            wall_time_ms=_parse(row["wall_time_ms"], float),
        ))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    return obj


def bounds_report(records: Sequence[TrialRecord], config: StudyConfig) -> dict:
    """Counts of deterministic-bound violations per trial (all should be 0)."""
    lower = upper = dominate = 0
    cd = c_d(config.d)
    for r in records:
        if math.isfinite(r.T_full) and r.T_full < r.s - r.h:
            lower += 1
        if r.T_prime is not None:
            if not (r.s - r.h <= r.T_prime <= cd * r.s):
                upper += 1
            if math.isfinite(r.T_full) and r.T_prime > r.T_full:
                dominate += 1
    return {"lower_bound": lower, "enriched_bounds": upper, "enriched_domination": dominate}
