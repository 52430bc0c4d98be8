"""Federated conformal quantiles under partial exchangeability.

With K clients holding N calibration scores in total, the threshold is the
r-th smallest of the N scores together with K placeholders at +inf, where
r = ceil((1 - alpha)(N + K)). When r > N the threshold is +inf and every
prediction set is the full label set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, FederationError, ScoreError
from .tdigest import TDigest, merge_all

METHODS = ("exact", "avg", "tdigest")
_EPS = 1e-9


def conformal_rank(n: int, K: int, alpha: float) -> int:
    """ceil((1 - alpha)(n + K)), guarded against float noise such as 0.95 * 100 = 95.0000001."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    return max(1, math.ceil((1.0 - alpha) * (n + K) - _EPS))


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Calibration scores tagged with the client that holds them."""

    clients: np.ndarray
    scores: np.ndarray
    nodes: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.clients, dtype=np.int64).ravel()
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        if c.shape != s.shape:
            raise ScoreError("one client id per score required")
        if not np.all(np.isfinite(s)):
            raise ScoreError("calibration scores must be finite")
        object.__setattr__(self, "clients", c)
        object.__setattr__(self, "scores", s)

    @classmethod
    def from_clients(cls, per_client) -> ScoreSet:
        per_client = [np.asarray(s, dtype=np.float64).ravel() for s in per_client]
        clients = np.concatenate([np.full(s.size, k) for k, s in enumerate(per_client)]) if per_client else []
        scores = np.concatenate(per_client) if per_client else []
        return cls(np.asarray(clients, dtype=np.int64), np.asarray(scores))

    @property
    def client_ids(self) -> np.ndarray:
        return np.unique(self.clients)

    def counts(self) -> dict[int, int]:
        ids, n = np.unique(self.clients, return_counts=True)
        return {int(k): int(c) for k, c in zip(ids, n)}

    def of(self, k: int) -> np.ndarray:
        return self.scores[self.clients == k]

    @property
    def N(self) -> int:
        return int(self.scores.size)

    @property
    def K(self) -> int:
        return int(self.client_ids.size)


def pooled_exact(scores: ScoreSet, alpha: float) -> float:
    N, K = scores.N, scores.K
    if N == 0:
        raise FederationError("no calibration scores")
    r = conformal_rank(N, K, alpha)
    if r > N:
        return math.inf
    return float(np.partition(scores.scores, r - 1)[r - 1])


def local_quantile(s: np.ndarray, alpha: float) -> float:
    """Classical split-CP order statistic ceil((1-alpha)(n+1)), capped at n."""
    n = s.size
    if n == 0:
        raise FederationError("client has no calibration scores")
    r = min(conformal_rank(n, 1, alpha), n)
    return float(np.partition(s, r - 1)[r - 1])


def quantile_average(scores: ScoreSet, alpha: float) -> float:
    """Σ_k p_k q_k with p_k = (n_k + 1)/(N + K) and q_k the client's local quantile."""
    counts = scores.counts()
    if not counts:
        raise FederationError("no calibration scores")
    N, K = scores.N, len(counts)
    if conformal_rank(N, K, alpha) > N:
        return math.inf
    total = 0.0
    for k in sorted(counts):
        total += (counts[k] + 1) / (N + K) * local_quantile(scores.of(k), alpha)
    return total


def client_digests(scores: ScoreSet, compression: float = 100.0) -> list[TDigest]:
    return [TDigest.from_values(scores.of(k), compression) for k in sorted(scores.counts())]


def tdigest_quantile(scores: ScoreSet, alpha: float, compression: float = 100.0) -> float:
    """Merged-sketch estimate of the same order statistic as ``pooled_exact``.

    The query level r/(N+K) refers to the N scores plus K placeholders at +inf,
    so it is answered at rank r of the merged digest of the N finite scores.
    """
    counts = scores.counts()
    if not counts:
        raise FederationError("no calibration scores")
    N, K = scores.N, len(counts)
    r = conformal_rank(N, K, alpha)
    if r > N:
        return math.inf
    return merge_all(client_digests(scores, compression)).value_at_rank(r)


def federated_quantile(scores: ScoreSet, alpha: float, method: str = "avg", compression: float = 100.0) -> float:
    if method == "exact":
        return pooled_exact(scores, alpha)
    if method == "avg":
        return quantile_average(scores, alpha)
    if method == "tdigest":
        return tdigest_quantile(scores, alpha, compression)
    raise ConfigurationError(f"unknown quantile method {method!r}; expected one of {METHODS}")
