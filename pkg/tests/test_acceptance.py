"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a one-line verdict that is printed in the terminal
summary.  Criteria 4 to 6 share one pair of percolation studies.
"""
import math
import os
import time

import numpy as np
import pytest

from oracles import enumerate_distance
from percolip.cli import main as cli_main
from percolip.fpp import (
    PathQuery,
    distances_match,
    distances_to,
    graph_distance,
    triangle_check,
)
from percolip.lab import StudyConfig, rate_fit, run_study, summarize
from percolip.lipschitz import (
    BoundaryData,
    LabelProblem,
    build_graph,
    cone_comparison_check,
    connectivity_eps,
    convergence_study,
    max_principle_margin,
    median_errors,
    residual_post_pass,
    solve,
)
from percolip.pointcloud import BoxDomain, c_d, delta_s, derive_seed, enrich, h_scaling, sample_poisson, strip_domain
from percolip.spatial import build_index

pytestmark = pytest.mark.acceptance

THREADS = min(8, os.cpu_count() or 1)
UNIT2 = BoxDomain.unit(2)


def test_c1_oracle_equivalence(criterion):
    rng = np.random.default_rng(1001)
    graph_distance(np.zeros((1, 2)), build_index(np.zeros((1, 2)), 1.0), PathQuery((0, 0), (1, 0), 1.0))
    start = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        n, d = int(rng.integers(0, 9)), int(rng.integers(1, 4))
        if rng.random() < 0.3:
            # integer coordinates produce many equal-length paths
            pts = rng.integers(0, 4, (n, d)).astype(float)
            x, y = rng.integers(0, 4, d).astype(float), rng.integers(0, 4, d).astype(float)
            h = float(rng.choice([1.0, 1.5, 2.0, 3.0]))
        else:
            pts = rng.random((n, d)) * 3
            x, y = rng.random(d) * 3, rng.random(d) * 3
            h = float(rng.uniform(0.3, 2.0))
        r = graph_distance(pts, build_index(pts, h), PathQuery(x, y, h))
        length, path = enumerate_distance(pts, x, y, h)
        mismatches += not (r.length == length and r.path == path)
    elapsed = time.perf_counter() - start
    ok = criterion(1, "oracle equivalence", mismatches == 0 and elapsed < 10,
                   f"{mismatches} mismatches in 500 instances, {elapsed:.1f} s (limit 10 s)")
    assert ok


def test_c2_deterministic_bounds(criterion):
    rng = np.random.default_rng(2002)
    start = time.perf_counter()
    queries = lower_bad = upper_bad = enriched_checked = 0
    for cloud_no in range(40):
        d = 2 if cloud_no % 4 else 3
        side = 24.0 if d == 2 else 8.0
        dom = BoxDomain((0.0,) * d, (side,) * d)
        cloud = sample_poisson(dom, 1.0, derive_seed(2002, cloud_no))
        h = float(rng.uniform(1.0, 4.0))
        delta = float(rng.uniform(0.5, 1.0)) * h
        enriched = enrich(cloud, delta)
        plain_idx = build_index(cloud.points, h)
        rich_pts = enriched.points
        rich_idx = build_index(rich_pts, h)
        for _ in range(250):
            x, y = rng.random(d) * side, rng.random(d) * side
            sep = float(np.linalg.norm(x - y))
            plain = distances_to(cloud.points, plain_idx, x, [y], h)[0]
            rich = distances_to(rich_pts, rich_idx, x, [y], h)[0]
            queries += 1
            for r in (plain, rich):
                if r.finite and not r.length >= sep - h:
                    lower_bad += 1
            if sep >= h:
                enriched_checked += 1
                if not rich.length <= c_d(d) * sep:
                    upper_bad += 1
    elapsed = time.perf_counter() - start
    ok = criterion(2, "deterministic bounds", lower_bad == 0 and upper_bad == 0 and elapsed < 120,
                   f"{queries} queries: {lower_bad} lower-bound and {upper_bad}/{enriched_checked} "
                   f"enriched upper-bound violations, {elapsed:.1f} s (limit 120 s)")
    assert ok


def test_c3_triangle_inequality(criterion):
    rng = np.random.default_rng(3003)
    violations = joined_violations = 0
    for cloud_no in range(20):
        dom = BoxDomain((0.0, 0.0), (15.0, 15.0))
        cloud = sample_poisson(dom, 1.0, derive_seed(3003, cloud_no))
        h = float(rng.uniform(1.5, 3.5))
        idx = build_index(cloud.points, h)
        for _ in range(100):
            x, y, z = rng.random((3, 2)) * 15
            violations += not triangle_check(cloud.points, idx, x, y, z, h, h, h)
            joined_violations += not triangle_check(cloud.points, idx, x, y, z, h, h, h, join_slack=True)
    ok = criterion(3, "triangle inequality", violations == 0,
                   f"{violations}/2000 violations of the literal inequality; "
                   f"{joined_violations}/2000 once the joining hop (h1+h2)/2 is allowed")
    assert ok


STUDY_SEED = 20240501
STUDY_A = (2.0, 3.0)


@pytest.fixture(scope="module")
def studies():
    out = {}
    start = time.perf_counter()
    for a in STUDY_A:
        cfg = StudyConfig(d=2, i_max=5, a=a, K=100, k_enrich=0.25, master_seed=STUDY_SEED)
        recs = run_study(cfg, threads=THREADS)
        out[a] = (cfg, recs, summarize(recs, cfg))
    out["elapsed"] = time.perf_counter() - start
    return out


def test_c4_sigma(criterion, studies):
    parts, ok = [], True
    for a in STUDY_A:
        cfg, _, summ = studies[a]
        sigma = summ.sigma_hat_prime
        means = [lv.T_prime.mean / lv.s for lv in summ.levels]
        ses = [lv.T_prime.sem / lv.s for lv in summ.levels]
        # from level 2 on, each mean may exceed its predecessor by at most one
        # standard error of the difference
        rises = [i + 1 for i in range(1, len(means) - 1)
                 if means[i + 1] - means[i] > math.hypot(ses[i], ses[i + 1])]
        ok &= 1.0 <= sigma <= 1.4 and not rises
        parts.append(f"a={a:g}: sigma_hat={sigma:.5f}, T'/s per level "
                     f"[{', '.join(f'{m:.5f}' for m in means)}], rises beyond 1 SE at levels {rises}")
    elapsed = studies["elapsed"]
    ok_time = elapsed < 20 * 60
    parts.append(f"runtime {elapsed:.0f} s on {THREADS} thread(s) (limit 1200 s on 8)")
    assert criterion(4, "sigma rerun", ok and ok_time, "; ".join(parts))


def test_c5_ratio(criterion, studies):
    parts, ok = [], True
    for a in STUDY_A:
        cfg, _, summ = studies[a]
        ratios = [lv.ratio for lv in summ.levels]
        err = [abs(r - 0.5) for r in ratios]
        fit = rate_fit([lv.s for lv in summ.levels], err)
        ok &= err[-1] < err[0] and fit.slope <= -0.4
        parts.append(f"a={a:g}: |ratio-1/2| level 1 {err[0]:.5f}, level 5 {err[-1]:.5f}, slope {fit.slope:.3f}")
    assert criterion(5, "ratio rerun", ok, "; ".join(parts))


def test_c6_concentration(criterion, studies):
    parts, ok = [], True
    for a in STUDY_A:
        _, _, summ = studies[a]
        vals = [lv.scaled_std for lv in summ.levels]
        growing = all(b > c for c, b in zip(vals, vals[1:]))
        ok &= max(vals) <= 5 and not growing
        parts.append(f"a={a:g}: scaled_std [{', '.join(f'{v:.4f}' for v in vals)}]")
    assert criterion(6, "concentration", ok, "; ".join(parts))


def test_c7_enriched_match(criterion):
    d, k = 2, 4.0
    matches = trials = 0
    for s in (100.0, 200.0, 400.0, 800.0):
        delta = delta_s(s, k, d)
        h = max(delta, h_scaling(s, 2.0, d))
        dom = strip_domain(s, d)
        for t in range(50):
            cloud = sample_poisson(dom, 1.0, derive_seed(7007, int(s), t))
            enriched = enrich(cloud, delta)
            matches += distances_match(cloud.points, enriched, PathQuery((0.0, 0.0), (s, 0.0), h))
            trials += 1
    freq = matches / trials
    assert criterion(7, "d = d' agreement", freq >= 0.95, f"match frequency {freq:.3f} over {trials} trials")


def random_problem(rng, k):
    n = float(rng.uniform(500, 4000))
    eps = connectivity_eps(n, 2, float(rng.uniform(2.0, 3.0)))
    graph = build_graph(UNIT2, n, eps, derive_seed(8008, k))
    kind = k % 4
    if kind == 0:
        f = BoundaryData.affine(rng.normal(size=2), float(rng.normal()))
    elif kind == 1:
        apex = rng.uniform(-1, 2, 2)
        f = BoundaryData.cone(apex, float(rng.uniform(0.5, 2)))
    elif kind == 2:
        w = rng.normal(size=(3, 2)) * 4
        f = lambda p: np.sin(p @ w.T).sum(axis=1)  # noqa: E731
    else:
        return LabelProblem(graph, rng.random(len(graph.boundary)))
    return LabelProblem.from_function(graph, f)


def test_c8_solver_contracts(criterion):
    rng = np.random.default_rng(8008)
    start = time.perf_counter()
    converged = bad_residual = bad_maxp = cone_bad = cone_checks = 0
    for k in range(100):
        problem = random_problem(rng, k)
        graph = problem.graph
        sol = solve(problem)
        if not sol.converged:
            continue
        converged += 1
        bad_residual += not residual_post_pass(sol, graph) < 1e-8
        bad_maxp += not max_principle_margin(sol, problem) >= 0
        done = 0
        while done < 50:
            center, radius = rng.uniform(0.15, 0.85, 2), rng.uniform(0.1, 0.35)
            near = np.linalg.norm(graph.points - center, axis=1) <= radius
            sub = np.flatnonzero(near & ~graph.boundary_mask)
            if len(sub) == 0:
                continue
            z = int(rng.choice(np.flatnonzero(~near)))
            cone_bad += not cone_comparison_check(sol, graph, sub, float(rng.uniform(0, 3)), z)
            cone_checks += 1
            done += 1
    elapsed = time.perf_counter() - start
    ok = converged and bad_residual == 0 and bad_maxp == 0 and cone_bad == 0 and elapsed < 600
    assert criterion(8, "solver contracts", ok,
                     f"{converged}/100 converged; residual failures {bad_residual}, max-principle failures "
                     f"{bad_maxp}, cone violations {cone_bad}/{cone_checks}, {elapsed:.0f} s (limit 600 s)")


def test_c9_lipschitz_convergence(criterion):
    g = BoundaryData.affine([1.0, 0.0], 0.0)
    start = time.perf_counter()
    recs = convergence_study(UNIT2, g, g, [1000, 4000, 16000], lambda n: connectivity_eps(n, 2, 2.5), 10,
                             9009, threads=THREADS)
    elapsed = time.perf_counter() - start
    med = median_errors(recs)
    m = [med[n]["median_error"] for n in (1000.0, 4000.0, 16000.0)]
    failed = sum(v["failed"] for v in med.values())
    ok = m[0] > m[1] > m[2] and m[2] < 0.5 * m[0] and elapsed < 1800
    assert criterion(9, "Lipschitz convergence trend", ok,
                     f"median sup errors {m[0]:.3e}, {m[1]:.3e}, {m[2]:.3e} (ratio {m[2] / m[0]:.3f}), "
                     f"{failed} unconverged, {elapsed:.0f} s (limit 1800 s)")


def test_c10_reproducibility(criterion, tmp_path):
    runs = {
        "percolation-study": ["--i-max", "3", "--K", "8", "--s0", "25", "--k-enrich", "0.25", "--seed", "10"],
        "lipschitz-study": ["--n-list", "300,600", "--trials", "3", "--seed", "10"],
    }
    differing = []
    for command, args in runs.items():
        outputs = []
        for threads in (1, 2, 8):
            out = tmp_path / f"{command}-{threads}"
            assert cli_main(["-q", command, *args, "--threads", str(threads), "--output-dir", str(out)]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"})
        if not (outputs[0] == outputs[1] == outputs[2]):
            differing.append(command)
    assert criterion(10, "reproducibility", not differing,
                     f"threads 1, 2, 8: data files differ for {differing or 'no command'}")
