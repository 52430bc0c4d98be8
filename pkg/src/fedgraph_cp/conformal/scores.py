"""Non-conformity scores. Smaller means more conforming.

All scorers work on an ``(n, L)`` matrix of class probabilities. Ranks are
1-based and computed by sorting probabilities in decreasing order with ties
broken by the smaller class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ScoreError

SIMPLEX_TOL = 1e-9


def _as_probs(probs) -> np.ndarray:
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] == 0:
        raise ScoreError("probabilities must be an (n, L) matrix")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ScoreError("each probability row must lie on the simplex")
    return P


def _check_labels(y, n: int, L: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape != (n,):
        raise ScoreError(f"expected {n} labels, got {y.size}")
    if np.any(y < 0) or np.any(y >= L):
        raise ScoreError(f"label outside [0, {L})")
    return y


def class_ranks(probs) -> np.ndarray:
    """rank[i, c] = 1-based position of class c in row i's descending order."""
    P = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-P, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(P.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, P.shape[1] + 1)
    return ranks


def mass_above(probs) -> np.ndarray:
    """ρ[i, c] = total probability of classes ranked strictly above c."""
    P = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-P, axis=1, kind="stable")
    sorted_p = np.take_along_axis(P, order, axis=1)
    before = np.cumsum(sorted_p, axis=1) - sorted_p
    out = np.empty_like(P)
    np.put_along_axis(out, order, before, axis=1)
    return out


def _u_column(u, n: int, randomized: bool) -> np.ndarray:
    if not randomized:
        return np.ones((n, 1))
    if u is None:
        raise ScoreError("randomized score needs uniform draws u")
    u = np.broadcast_to(np.asarray(u, dtype=np.float64).reshape(-1), (n,))
    if np.any(u < 0) or np.any(u > 1):
        raise ScoreError("u must lie in [0, 1]")
    return u[:, None]


def aps_matrix(probs, randomized: bool = False, u=None) -> np.ndarray:
    """APS scores for every (node, class): ρ + u·π, with u = 1 when deterministic.

    With u = 1 this is the cumulative sorted mass V(x, rank(y)).
    """
    P = _as_probs(probs)
    return mass_above(P) + _u_column(u, P.shape[0], randomized) * P


def raps_matrix(probs, nu: float = 0.01, k_reg: int = 1, randomized: bool = False, u=None) -> np.ndarray:
    if nu < 0 or k_reg < 1:
        raise ScoreError("RAPS needs nu >= 0 and k_reg >= 1")
    P = _as_probs(probs)
    penalty = nu * np.maximum(class_ranks(P) - k_reg, 0)
    return aps_matrix(P, randomized, u) + penalty


def lac_matrix(probs) -> np.ndarray:
    return 1.0 - _as_probs(probs)


def score_aps(probs, y: int, randomized: bool = False, u: float | None = None) -> float:
    P = _as_probs(probs)
    y = _check_labels([y], 1, P.shape[1])[0]
    return float(aps_matrix(P, randomized, None if u is None else [u])[0, y])


def score_raps(probs, y: int, nu: float = 0.01, k_reg: int = 1, u: float = 1.0) -> float:
    """ρ(x, y) + u·π_y + ν·max(rank(y) − k_reg, 0)."""
    P = _as_probs(probs)
    y = _check_labels([y], 1, P.shape[1])[0]
    return float(raps_matrix(P, nu, k_reg, randomized=True, u=[u])[0, y])


def score_lac(probs, y: int) -> float:
    P = _as_probs(probs)
    y = _check_labels([y], 1, P.shape[1])[0]
    return float(1.0 - P[0, y])


@dataclass(frozen=True)
class Scorer:
    """A configured score family; ``matrix`` scores every class of every row."""

    name: str = "aps"
    randomized: bool = False
    nu: float = 0.01
    k_reg: int = 1

    def __post_init__(self):
        if self.name not in ("aps", "raps", "lac"):
            raise ScoreError(f"unknown score {self.name!r}")

    def matrix(self, probs, u=None) -> np.ndarray:
        if self.name == "aps":
            return aps_matrix(probs, self.randomized, u)
        if self.name == "raps":
            return raps_matrix(probs, self.nu, self.k_reg, self.randomized, u)
        return lac_matrix(probs)

    def true_scores(self, probs, labels, u=None) -> np.ndarray:
        S = self.matrix(probs, u)
        y = _check_labels(labels, S.shape[0], S.shape[1])
        return S[np.arange(S.shape[0]), y]

    @property
    def uses_u(self) -> bool:
        return self.randomized and self.name in ("aps", "raps")
