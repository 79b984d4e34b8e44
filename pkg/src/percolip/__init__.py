"""Euclidean first-passage percolation on Poisson clouds and Lipschitz learning
on random geometric graphs."""

__version__ = "0.1.0"

from .errors import ConfigError, ConvergenceError, DisconnectedError, PercolipError, SizeError
from .fpp import DistanceResult, PathQuery, distances_to, graph_distance, vertex_distances
from .lab import StudyConfig, TrialRecord, run_study, summarize
from .lipschitz import (
    GeometricGraph,
    LabelProblem,
    Solution,
    build_graph,
    convergence_study,
    graph_from_cloud,
    r_tau_diagnostic,
    solve,
)
from .pointcloud import BoxDomain, EnrichedCloud, PointCloud, enrich, sample_binomial, sample_poisson
from .spatial import GridIndex, build_index, neighbors_within

__all__ = [
    "BoxDomain", "ConfigError", "ConvergenceError", "DisconnectedError", "DistanceResult", "EnrichedCloud",
    "GeometricGraph", "GridIndex", "LabelProblem", "PathQuery", "PercolipError", "PointCloud", "SizeError",
    "Solution", "StudyConfig", "TrialRecord", "build_graph", "build_index", "convergence_study",
    "distances_to", "enrich", "graph_distance", "graph_from_cloud", "neighbors_within", "r_tau_diagnostic",
    "run_study", "sample_binomial", "sample_poisson", "solve", "summarize", "vertex_distances",
]
