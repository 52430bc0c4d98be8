"""Merging t-digest with the k1 (arcsine) scale function.

A digest is an ordered list of centroids, each holding a mean, a weight and
the smallest and largest value folded into it. Building one sorts the input
first, so the result depends only on the multiset of values. Merging two
digests pools their centroids and only re-runs the compression pass once the
pool outgrows ``MERGE_BUFFER * compression`` centroids. Below that size a merge
loses nothing, so any merge order gives the same digest.

Queries interpolate through three knots per centroid: its minimum at the left
edge of its weight span, its mean at the middle and its maximum at the right
edge. A centroid of identical values (an atom) therefore answers exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MERGE_BUFFER = 50


def _k1(q, delta):
    return delta / (2.0 * math.pi) * np.arcsin(2.0 * np.clip(q, 0.0, 1.0) - 1.0)


def _compress(means, weights, lo, hi, delta: float):
    """One left-to-right merge pass over centroids already sorted by mean."""
    total = float(weights.sum())
    out = []
    cur = [float(means[0]), float(weights[0]), float(lo[0]), float(hi[0])]
    done = 0.0  # weight strictly left of the current centroid
    k_left = _k1(0.0, delta)
    for m, w, a, b in zip(means[1:], weights[1:], lo[1:], hi[1:]):
        m, w = float(m), float(w)
        if _k1((done + cur[1] + w) / total, delta) - k_left <= 1.0:
            cur[1] += w
            cur[0] += (m - cur[0]) * w / cur[1]
            cur[2], cur[3] = min(cur[2], a), max(cur[3], b)
        else:
            out.append(cur)
            done += cur[1]
            k_left = _k1(done / total, delta)
            cur = [m, w, float(a), float(b)]
    out.append(cur)
    return _dedupe(*np.array(out).T)


def _dedupe(means, weights, lo, hi):
    # fold centroids whose means coincide so that means stay strictly increasing
    keep = [[means[0], weights[0], lo[0], hi[0]]]
    for m, w, a, b in zip(means[1:], weights[1:], lo[1:], hi[1:]):
        if m <= keep[-1][0]:
            M, W, A, B = keep[-1]
            keep[-1] = [M, W + w, min(A, a), max(B, b)]
        else:
            keep.append([m, w, a, b])
    return tuple(np.array(keep, dtype=np.float64).T)


@dataclass(frozen=True)
class TDigest:
    means: np.ndarray
    weights: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray
    compression: float = 100.0

    @classmethod
    def empty(cls, compression: float = 100.0) -> TDigest:
        z = np.zeros(0)
        return cls(z, z, z, z, compression)

    @classmethod
    def from_values(cls, values, compression: float = 100.0) -> TDigest:
        x = np.sort(np.asarray(values, dtype=np.float64).ravel())
        if x.size == 0:
            return cls.empty(compression)
        if not np.all(np.isfinite(x)):
            raise ValueError("t-digest values must be finite")
        return cls(*_compress(x, np.ones(x.size), x, x, compression), compression)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def vmin(self) -> float:
        return float(self.mins[0]) if self.means.size else math.nan

    @property
    def vmax(self) -> float:
        return float(self.maxs[-1]) if self.means.size else math.nan

    def __len__(self) -> int:
        return int(self.means.size)

    def merge(self, other: TDigest) -> TDigest:
        if other.means.size == 0:
            return self
        if self.means.size == 0:
            return other
        cols = [np.concatenate([a, b]) for a, b in zip(self._columns(), other._columns())]
        order = np.argsort(cols[0], kind="stable")
        cols = [c[order] for c in cols]
        if cols[0].size <= MERGE_BUFFER * self.compression:
            return TDigest(*_dedupe(*cols), self.compression)
        return TDigest(*_compress(*cols, self.compression), self.compression)

    def _columns(self):
        return self.means, self.weights, self.mins, self.maxs

    def _knots(self):
        left = np.cumsum(self.weights) - self.weights
        xs = np.column_stack([left, left + self.weights / 2.0, left + self.weights]).ravel()
        # After merges the value ranges of neighbouring centroids can overlap.
        # At each boundary, clamp to the value that plain centre-to-centre
        # interpolation gives there, which keeps the knots non-decreasing.
        m, w = self.means, self.weights
        edge = m[:-1] + (m[1:] - m[:-1]) * w[:-1] / (w[:-1] + w[1:])
        lo = np.maximum(self.mins, np.concatenate([[-np.inf], edge]))
        hi = np.minimum(self.maxs, np.concatenate([edge, [np.inf]]))
        ys = np.column_stack([lo, self.means, hi]).ravel()
        return xs, ys

    def value_at_index(self, index: float) -> float:
        """Value at cumulative weight ``index`` in [0, W]."""
        if self.means.size == 0:
            raise ValueError("empty digest")
        xs, ys = self._knots()
        return float(np.interp(min(max(index, 0.0), self.total_weight), xs, ys))

    def quantile(self, q: float) -> float:
        return self.value_at_index(q * self.total_weight)

    def value_at_rank(self, r: int) -> float:
        """Approximate r-th smallest inserted value (1-based)."""
        return self.value_at_index(r - 0.5)

    def rank_of(self, x: float) -> float:
        """Approximate number of inserted values <= x."""
        if self.means.size == 0:
            return 0.0
        xs, ys = self._knots()
        # the knots are non-decreasing in value; take the right end of any flat run
        i = int(np.searchsorted(ys, x, side="right"))
        if i == 0:
            return 0.0
        if i == ys.size:
            return float(xs[-1])
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
        return float(x0 + (x1 - x0) * (x - y0) / (y1 - y0))


def merge_all(digests) -> TDigest:
    digests = list(digests)
    out = digests[0]
    for d in digests[1:]:
        out = out.merge(d)
    return out
