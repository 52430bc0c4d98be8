"""Conformal scores, federated quantiles, prediction sets and metrics."""

from .quantile import (
    METHODS,
    ScoreSet,
    conformal_rank,
    federated_quantile,
    local_quantile,
    pooled_exact,
    quantile_average,
    tdigest_quantile,
)
from .scores import Scorer, aps_matrix, class_ranks, lac_matrix, raps_matrix, score_aps, score_lac, score_raps
from .sets import (
    CoverageCheck,
    PredictionSet,
    build_sets,
    coverage_bound_check,
    coverage_bounds,
    metrics,
    sets_from_members,
)
from .tdigest import TDigest, merge_all

__all__ = [
    "METHODS",
    "CoverageCheck",
    "PredictionSet",
    "ScoreSet",
    "Scorer",
    "TDigest",
    "aps_matrix",
    "build_sets",
    "class_ranks",
    "conformal_rank",
    "coverage_bound_check",
    "coverage_bounds",
    "federated_quantile",
    "lac_matrix",
    "local_quantile",
    "merge_all",
    "metrics",
    "pooled_exact",
    "quantile_average",
    "raps_matrix",
    "score_aps",
    "score_lac",
    "score_raps",
    "sets_from_members",
    "tdigest_quantile",
]
