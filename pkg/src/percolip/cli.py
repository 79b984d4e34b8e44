"""Command-line front end.

Every subcommand reads an optional TOML or JSON config file; command-line
flags (``--kebab-case`` versions of the config keys) override file values.
All outputs are computed in memory and only then written to the output
directory together with ``manifest.json``, so a failed run leaves nothing
behind.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(non-convergence), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, PercolipError
from .fpp import PathQuery, graph_distance
from .lab import StudyConfig, _jsonable, format_value, records_to_csv, run_study, summarize
from .lipschitz import (
    DEFAULT_TOL,
    BoundaryData,
    LabelProblem,
    connectivity_eps,
    convergence_study,
    graph_from_cloud,
    max_principle_margin,
    median_errors,
    require_converged,
    residual_post_pass,
    solve,
)
from .pointcloud import BoxDomain, PointCloud, sample_binomial, sample_poisson
from .spatial import build_index

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("percolip")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "PERCOLIP_THREADS"
MANIFEST = "manifest.json"

REQUIRED = object()


@dataclass(frozen=True)
class Param:
    kind: str  # int, float, bool, str, floats, data
    default: Any = None
    help: str = ""
    choices: tuple = ()


COMMON = {
    "seed": Param("int", 0, "master seed"),
    "threads": Param("int", None, f"worker threads (fallback ${THREADS_ENV}, then 1)"),
    "output_dir": Param("str", "percolip-out", "directory for outputs and manifest.json"),
}

COMMANDS: dict[str, dict[str, Param]] = {
    "sample": {
        "domain_lo": Param("floats", REQUIRED, "lower domain corner, comma separated"),
        "domain_hi": Param("floats", REQUIRED, "upper domain corner, comma separated"),
        "intensity": Param("float", REQUIRED, "Poisson intensity, or point count for binomial"),
        "process": Param("str", "poisson", "point process", ("poisson", "binomial")),
        "format": Param("str", "csv", "cloud file format", ("csv", "json")),
    },
    "fpp-distance": {
        "cloud": Param("str", REQUIRED, "point cloud CSV"),
        "x": Param("floats", REQUIRED, "start point"),
        "y": Param("floats", REQUIRED, "end point"),
        "h": Param("float", REQUIRED, "maximal hop length"),
        "clip": Param("bool", False, "restrict the search to the localization ball"),
        "output_dir": Param("str", None, "also write result.json here"),
    },
    "percolation-study": {
        "d": Param("int", 2, "dimension"),
        "i_max": Param("int", 5, "number of levels, s_i = s0 * 2^i"),
        "a": Param("float", 2.0, "factor in h_s = a (ln s)^(1/d)"),
        "K": Param("int", 100, "trials per level"),
        "k_enrich": Param("float", None, "enrichment exponent k (omit for no enrichment)"),
        "s0": Param("float", 100.0, "base scale"),
        "clip": Param("bool", True, "restrict searches to the localization ball"),
        "record_timing": Param("bool", False, "fill wall_time_ms (makes records.csv run dependent)"),
    },
    "lipschitz-solve": {
        "cloud": Param("str", None, "point cloud CSV (otherwise a cloud is sampled)"),
        "domain_lo": Param("floats", None, "lower domain corner"),
        "domain_hi": Param("floats", None, "upper domain corner"),
        "n": Param("float", None, "intensity of the sampled cloud"),
        "process": Param("str", "poisson", "point process", ("poisson", "binomial")),
        "eps": Param("float", None, "graph length scale (default eps_factor (ln n / n)^(1/d))"),
        "eps_factor": Param("float", 2.5, "factor of the default eps"),
        "boundary_width": Param("float", None, "boundary layer width (default eps)"),
        "g": Param("data", REQUIRED, "affine:c1,..,cd,b | cone:a1,..,ad,scale | file:PATH"),
        "tol": Param("float", DEFAULT_TOL, "residual tolerance"),
        "max_sweeps": Param("int", None, "sweep limit"),
    },
    "lipschitz-study": {
        "domain_lo": Param("floats", [0.0, 0.0], "lower domain corner"),
        "domain_hi": Param("floats", [1.0, 1.0], "upper domain corner"),
        "g": Param("data", "affine:1,0,0", "affine or cone data; also the exact solution"),
        "n_list": Param("floats", [1000.0, 4000.0, 16000.0], "intensities"),
        "eps_factor": Param("float", 2.5, "eps_n = eps_factor (ln n / n)^(1/d)"),
        "trials": Param("int", 10, "trials per intensity"),
        "tol": Param("float", DEFAULT_TOL, "residual tolerance"),
        "max_sweeps": Param("int", None, "sweep limit"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    params: dict
    seed: int = 0
    threads: int = 1
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "threads": self.threads,
                "output_dir": self.output_dir, **self.params}


# --- config parsing ---------------------------------------------------------------


def schema(command: str) -> dict[str, Param]:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    return {**COMMON, **COMMANDS[command]}


def _check_type(key: str, p: Param, value):
    def bad(expected):
        return ConfigError(f"key {key!r}: expected {expected}, got {value!r}")

    if value is None:
        return None
    number = (int, float)
    if p.kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
    elif p.kind == "float":
        if isinstance(value, bool) or not isinstance(value, number):
            raise bad("a number")
        value = float(value)
    elif p.kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
    elif p.kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
    elif p.kind == "floats":
        if not isinstance(value, list) or not value or any(
                isinstance(v, bool) or not isinstance(v, number) for v in value):
            raise bad("a non-empty list of numbers")
        value = [float(v) for v in value]
    elif p.kind == "data":
        if isinstance(value, dict):
            if len(value) != 1 or next(iter(value)) not in ("affine", "cone", "file"):
                raise bad("a table with one key among affine, cone, file")
        elif not isinstance(value, str):
            raise bad("a string or a table")
    if p.choices and value not in p.choices:
        raise ConfigError(f"key {key!r}: must be one of {list(p.choices)}, got {value!r}")
    return value


def _from_flag(key: str, p: Param, text: str):
    try:
        if p.kind == "int":
            return int(text)
        if p.kind == "float":
            return float(text)
        if p.kind == "floats":
            return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"flag --{key.replace('_', '-')}: cannot parse {text!r} as {p.kind}") from None
    return text


def load_config_file(path: str | os.PathLike) -> dict:
    """Parse a TOML file, or JSON when the suffix is ``.json``."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            obj = json.loads(text)
        else:
            obj = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="percolip", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML or JSON config file")
        for key, p in schema(name).items():
            flag = "--" + key.replace("_", "-")
            text = p.help
            if p.default is not REQUIRED and p.default is not None:
                text += f" (default {p.default})"
            if p.kind == "bool":
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=text)
            else:
                sp.add_argument(flag, dest=key, default=None, help=text)
    return parser


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from flags and an optional config file.

    Precedence: flag, then file, then default.  ``threads`` falls back to
    ``$PERCOLIP_THREADS`` before the default of 1.
    """
    ns = build_parser().parse_args(argv)
    return resolve(ns.command, vars(ns), ns.config)


def resolve(command: str, flags: dict, config_path: str | None = None) -> RunConfig:
    keys = schema(command)
    values: dict[str, Any] = {}
    if config_path is not None:
        raw = load_config_file(config_path)
        if "command" in raw and raw.pop("command") != command:
            raise ConfigError(f"config file is for a different command than {command!r}")
        block = raw.pop(command, {})
        if not isinstance(block, dict):
            raise ConfigError(f"key {command!r}: expected a table")
        raw.update(block)
        unknown = sorted(set(raw) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(map(repr, unknown))}")
        values = {k: _check_type(k, keys[k], v) for k, v in raw.items()}
    for key, p in keys.items():
        text = flags.get(key)
        if text is not None:
            values[key] = _check_type(key, p, text if p.kind == "bool" else _from_flag(key, p, text))
    missing = [k for k, p in keys.items() if p.default is REQUIRED and values.get(k) is None]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(map(repr, missing))}")
    for key, p in keys.items():
        if values.get(key) is None and p.default is not REQUIRED:
            values[key] = p.default

    threads = values.pop("threads")
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"${THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            threads = 1
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    seed = values.pop("seed")
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    output_dir = values.pop("output_dir")
    if output_dir is not None:
        _check_writable(Path(output_dir))
    return RunConfig(command, values, seed, threads, output_dir)


def _check_writable(path: Path) -> None:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output_dir {str(path)!r} exists and is not a directory")
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output_dir {str(path)!r} is not writable")


# --- helpers -----------------------------------------------------------------------


def version_string() -> str:
    """Package version, extended with ``git describe`` output when run from a checkout."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__ as base
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--abbrev=7"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return base
    desc = out.stdout.strip()
    if out.returncode != 0 or not desc:
        return base
    # tagless repositories print a bare hash
    return desc if "-g" in desc or desc.startswith("v") else f"{base}-g{desc}"


def _domain(lo, hi) -> BoxDomain:
    if lo is None or hi is None:
        raise ConfigError("domain_lo and domain_hi are both required")
    try:
        return BoxDomain(tuple(lo), tuple(hi))
    except PercolipError as exc:
        raise ConfigError(f"invalid domain: {exc}") from exc


def _read_cloud(path: str, domain: BoxDomain | None = None) -> PointCloud:
    return PointCloud.from_csv(Path(path).read_text(), domain)


def boundary_data(value, d: int) -> BoundaryData | tuple[str, str]:
    """Parse ``affine:c1,..,cd,b``, ``cone:a1,..,ad,scale`` or ``file:PATH``
    (or the equivalent one-key table).  Files come back as ``("file", path)``."""
    if isinstance(value, dict):
        kind, arg = next(iter(value.items()))
        if kind == "file":
            return ("file", str(arg))
        try:
            vec, last = arg
            values = [float(v) for v in vec] + [float(last)]
        except (TypeError, ValueError):
            raise ConfigError(f"key 'g': {kind} expects [[v1, .., vd], number], got {arg!r}") from None
    else:
        kind, _, arg = value.partition(":")
        if kind == "file":
            if not arg:
                raise ConfigError("key 'g': file: needs a path")
            return ("file", arg)
        try:
            values = [float(v) for v in arg.split(",")]
        except ValueError:
            raise ConfigError(f"key 'g': cannot parse numbers in {value!r}") from None
    if kind not in ("affine", "cone"):
        raise ConfigError(f"key 'g': kind must be affine, cone or file, got {kind!r}")
    if len(values) != d + 1:
        raise ConfigError(f"key 'g': {kind} needs {d + 1} numbers in dimension {d}, got {len(values)}")
    if kind == "affine":
        return BoundaryData.affine(values[:d], values[d])
    return BoundaryData.cone(values[:d], values[d])


def _boundary_file(path: str, boundary: np.ndarray) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    if rows and set(rows[0]) != {"index", "g"}:
        raise ConfigError(f"{path}: boundary value CSV needs columns index,g")
    try:
        given = {int(r["index"]): float(r["g"]) for r in rows}
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    want = set(boundary.tolist())
    if set(given) != want:
        extra = sorted(set(given) - want)[:5]
        lacking = sorted(want - set(given))[:5]
        raise ConfigError(f"{path}: indices must be exactly the boundary vertices "
                          f"(not boundary: {extra}, missing: {lacking})")
    return np.array([given[i] for i in boundary.tolist()])


def _json_bytes(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n").encode()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue().encode()


class _Progress:
    """Thread-safe ``done/total`` counter printed to stderr at most twice a second."""

    def __init__(self, label: str, total: int):
        self.label, self.total, self.done = label, total, 0
        self.lock = threading.Lock()
        self.last = 0.0

    def __call__(self, *_):
        with self.lock:
            self.done += 1
            now = time.monotonic()
            if self.done == self.total or now - self.last >= 0.5:
                self.last = now
                log.info("%s: %d/%d", self.label, self.done, self.total)


# --- commands ----------------------------------------------------------------------
# Each returns ({file name: bytes}, optional stdout text).


def run_sample(cfg: RunConfig):
    p = cfg.params
    dom = _domain(p["domain_lo"], p["domain_hi"])
    draw = sample_poisson if p["process"] == "poisson" else sample_binomial
    intensity = p["intensity"] if p["process"] == "poisson" else int(p["intensity"])
    cloud = draw(dom, intensity, cfg.seed)
    log.info("sampled %d points", len(cloud))
    if p["format"] == "json":
        return {"cloud.json": cloud.to_json().encode()}, None
    return {"cloud.csv": cloud.to_csv().encode()}, None


def run_fpp_distance(cfg: RunConfig):
    p = cfg.params
    cloud = _read_cloud(p["cloud"])
    query = PathQuery(tuple(p["x"]), tuple(p["y"]), p["h"])
    if len(query.x) != cloud.dim:
        raise ConfigError(f"endpoints have dimension {len(query.x)}, the cloud {cloud.dim}")
    index = build_index(cloud.points, query.h)
    res = graph_distance(cloud.points, index, query, clip=p["clip"])
    out = {k: res.to_dict()[k] for k in ("length", "hops", "path")}
    text = json.dumps(out)
    files = {"result.json": _json_bytes(out)} if cfg.output_dir is not None else {}
    return files, text


def run_percolation_study(cfg: RunConfig):
    p = cfg.params
    try:
        study = StudyConfig(d=p["d"], i_max=p["i_max"], a=p["a"], K=p["K"], k_enrich=p["k_enrich"],
                            master_seed=cfg.seed, s0=p["s0"], clip=p["clip"])
    except PercolipError as exc:
        raise ConfigError(str(exc)) from exc
    progress = _Progress("trials", study.K * study.i_max)
    records = run_study(study, threads=cfg.threads, progress=progress)
    summary = summarize(records, study)
    return {
        "records.csv": records_to_csv(records, record_timing=p["record_timing"]).encode(),
        "summary.json": _json_bytes(summary.to_dict()),
    }, None


def _eps_default(p, n: float, d: int) -> float:
    return p["eps"] if p.get("eps") is not None else connectivity_eps(n, d, p["eps_factor"])


def run_lipschitz_solve(cfg: RunConfig):
    p = cfg.params
    if p["cloud"] is not None:
        dom = None if p["domain_lo"] is None and p["domain_hi"] is None else _domain(p["domain_lo"], p["domain_hi"])
        cloud = _read_cloud(p["cloud"], dom)
        n = len(cloud) / cloud.domain.volume
    else:
        if p["n"] is None:
            raise ConfigError("either 'cloud' or 'n' is required")
        dom = _domain(p["domain_lo"], p["domain_hi"])
        n = p["n"]
        cloud = (sample_poisson(dom, n, cfg.seed) if p["process"] == "poisson"
                 else sample_binomial(dom, int(n), cfg.seed))
    d = cloud.dim
    eps = _eps_default(p, n, d)
    data = boundary_data(p["g"], d)
    graph = graph_from_cloud(cloud, eps, p["boundary_width"])
    for w in graph.warnings:
        log.warning("%s", w)
    if isinstance(data, tuple):
        problem = LabelProblem(graph, _boundary_file(data[1], graph.boundary))
    else:
        problem = LabelProblem.from_function(graph, data)
    log.info("solving on %d vertices (%d boundary), eps=%.4g", graph.n_vertices, len(graph.boundary), eps)
    sol = require_converged(solve(problem, p["tol"], p["max_sweeps"]))
    is_bd = np.zeros(graph.n_vertices, dtype=int)
    is_bd[graph.boundary] = 1
    header = ["index"] + [f"x{k + 1}" for k in range(d)] + ["u", "is_boundary"]
    rows = ([i, *graph.points[i].tolist(), sol.u[i], is_bd[i]] for i in range(graph.n_vertices))
    diag = {
        "n_vertices": graph.n_vertices,
        "n_boundary": len(graph.boundary),
        "eps": eps,
        "boundary_width": graph.boundary_width,
        "sweeps": sol.iterations,
        "residual": sol.max_residual,
        "post_pass_residual": residual_post_pass(sol, graph),
        "tol": sol.tol,
        "converged": sol.converged,
        "max_principle_margin": max_principle_margin(sol, problem),
    }
    return {"u.csv": _csv_bytes(header, rows), "diagnostics.json": _json_bytes(diag)}, None


ERROR_COLUMNS = ("n", "trial", "eps", "n_vertices", "sup_error", "residual", "sweeps", "converged")


def run_lipschitz_study(cfg: RunConfig):
    p = cfg.params
    dom = _domain(p["domain_lo"], p["domain_hi"])
    data = boundary_data(p["g"], dom.dim)
    if isinstance(data, tuple):
        raise ConfigError("key 'g': the study needs affine or cone data (it doubles as the exact solution)")
    if p["trials"] < 1:
        raise ConfigError(f"key 'trials': must be >= 1, got {p['trials']}")
    d = dom.dim
    records = convergence_study(dom, data, data, p["n_list"], lambda n: _eps_default(p, n, d),
                                p["trials"], cfg.seed, tol=p["tol"], max_sweeps=p["max_sweeps"],
                                threads=cfg.threads)
    failed = sum(not r.converged for r in records)
    if failed:
        log.warning("%d trial(s) did not converge and are excluded from the medians", failed)
    rows = ([getattr(r, c) for c in ERROR_COLUMNS] for r in records)
    medians = [{"n": n, **v} for n, v in median_errors(records).items()]
    return {"errors.csv": _csv_bytes(ERROR_COLUMNS, rows), "summary.json": _json_bytes({"medians": medians})}, None


_RUNNERS = {
    "sample": run_sample,
    "fpp-distance": run_fpp_distance,
    "percolation-study": run_percolation_study,
    "lipschitz-solve": run_lipschitz_solve,
    "lipschitz-study": run_lipschitz_study,
}


# --- execution ---------------------------------------------------------------------


def write_outputs(output_dir: str | os.PathLike, files: dict[str, bytes], manifest: dict) -> None:
    """Write ``files`` and ``manifest.json`` into ``output_dir``.

    Files are staged in a temporary sibling directory and moved in only
    once all of them are on disk.
    """
    out = Path(output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".percolip-", dir=out.parent))
    try:
        for name, data in {**files, MANIFEST: _json_bytes(manifest)}.items():
            (stage / name).write_bytes(data)
        out.mkdir(exist_ok=True)
        for name in [*files, MANIFEST]:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def verify_manifest(output_dir: str | os.PathLike) -> list[str]:
    """Names of outputs whose checksum no longer matches the manifest."""
    out = Path(output_dir)
    manifest = json.loads((out / MANIFEST).read_text())
    return [name for name, digest in manifest["outputs"].items()
            if not (out / name).is_file() or sha256((out / name).read_bytes()) != digest]


def execute(config: RunConfig, stdout=None) -> int:
    """Run ``config``; write outputs and the manifest.  Errors propagate."""
    start = time.time()
    files, text = _RUNNERS[config.command](config)
    if text is not None:
        print(text, file=stdout or sys.stdout)
    if config.output_dir is not None:
        manifest = {
            "command": config.command,
            "config": config.to_dict(),
            "version": version_string(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(start)),
            "wall_time_s": time.time() - start,
            "outputs": {name: sha256(data) for name, data in files.items()},
        }
        write_outputs(config.output_dir, files, manifest)
        log.info("wrote %s to %s", ", ".join([*files, MANIFEST]), config.output_dir)
    return EXIT_OK


def _report(code: int, exc: BaseException, command: str | None) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    print(json.dumps(report), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if ns.quiet else logging.INFO,
                        format="percolip: %(message)s", stream=sys.stderr)
    try:
        config = resolve(ns.command, vars(ns), ns.config)
        return execute(config)
    except ConvergenceError as exc:
        return _report(EXIT_NUMERICAL, exc, ns.command)
    except PercolipError as exc:
        return _report(EXIT_CONFIG, exc, ns.command)
    except OSError as exc:
        return _report(EXIT_IO, exc, ns.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
