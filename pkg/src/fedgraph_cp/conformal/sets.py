"""Prediction sets, coverage/inefficiency metrics and the coverage-bound simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, MetricsError
from .quantile import ScoreSet, conformal_rank, federated_quantile
from .scores import Scorer


@dataclass(frozen=True, eq=False)
class PredictionSet:
    members: np.ndarray  # (n, L) boolean
    alpha: float
    qhat: float

    def sizes(self) -> np.ndarray:
        return self.members.sum(axis=1)

    def as_lists(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.members]


def build_sets(probs, qhat: float, scorer: Scorer | None = None, alpha: float = math.nan, u=None) -> PredictionSet:
    """Include class y for a node iff its score is <= q̂ (q̂ = +inf keeps every class)."""
    scorer = scorer or Scorer()
    S = scorer.matrix(probs, u)
    members = np.ones_like(S, dtype=bool) if math.isinf(qhat) and qhat > 0 else S <= qhat
    return PredictionSet(members, alpha, qhat)


def sets_from_members(members, alpha: float = math.nan, qhat: float = math.nan) -> PredictionSet:
    return PredictionSet(np.asarray(members, dtype=bool), alpha, qhat)


def metrics(sets: PredictionSet, labels) -> tuple[float, float]:
    """(coverage, inefficiency) = (fraction containing the label, mean set size)."""
    M = sets.members
    y = np.asarray(labels, dtype=np.int64).ravel()
    if M.shape[0] == 0:
        raise MetricsError("no test nodes")
    if y.shape != (M.shape[0],):
        raise MetricsError(f"{y.size} labels for {M.shape[0]} prediction sets")
    if np.any(y < 0) or np.any(y >= M.shape[1]):
        raise MetricsError("label outside the set's class range")
    covered = M[np.arange(M.shape[0]), y]
    return float(covered.mean()), float(M.sum(axis=1).mean())


# ------------------------------------------------------------ coverage bounds


def coverage_bounds(K: int, N: int, alpha: float) -> tuple[float, float]:
    """[1 - α, 1 - α + K/(N + K)]."""
    return 1.0 - alpha, 1.0 - alpha + K / (N + K)


@dataclass(frozen=True)
class CoverageCheck:
    coverage: float
    lower: float
    upper: float
    margin: float
    trials: int

    @property
    def ok(self) -> bool:
        return self.lower - self.margin <= self.coverage <= self.upper + self.margin


def uniform_sampler(rng, shape, client: int = 0):
    return rng.random(shape)


def coverage_bound_check(
    K: int,
    n_k,
    alpha: float,
    trials: int,
    sampler=uniform_sampler,
    method: str = "exact",
    seed: int = 0,
) -> CoverageCheck:
    """Monte Carlo estimate of P(s_test <= q̂) against the partial-exchangeability bounds.

    Each trial draws fresh calibration scores for every client and one test
    score from a client chosen with probability (n_k + 1)/(N + K).
    ``sampler(rng, shape, k)`` returns a ``shape`` array of client k's scores;
    draws must be exchangeable within a client.
    """
    if trials < 100:
        raise ConfigurationError("coverage check needs at least 100 trials")
    n_k = np.broadcast_to(np.asarray(n_k, dtype=np.int64), (K,)).copy()
    if np.any(n_k < 1):
        raise ConfigurationError("every client needs at least one calibration score")
    N = int(n_k.sum())
    rng = np.random.default_rng(seed)
    draws = [np.asarray(sampler(rng, (trials, int(n_k[k]) + 1), k), dtype=np.float64) for k in range(K)]
    test_client = rng.choice(K, size=trials, p=(n_k + 1) / (N + K))
    calib = np.concatenate([d[:, :-1] for d in draws], axis=1)
    test = np.stack([d[:, -1] for d in draws], axis=1)[np.arange(trials), test_client]

    r = conformal_rank(N, K, alpha)
    if method == "exact":
        qhat = np.full(trials, math.inf) if r > N else np.partition(calib, r - 1, axis=1)[:, r - 1]
    else:
        clients = np.repeat(np.arange(K), n_k)
        qhat = np.array([federated_quantile(ScoreSet(clients, row), alpha, method) for row in calib])
    c = float(np.mean(test <= qhat))
    lo, hi = coverage_bounds(K, N, alpha)
    margin = 3.0 * math.sqrt(max(c * (1.0 - c), 0.0) / trials)
    return CoverageCheck(c, lo, hi, margin, trials)
