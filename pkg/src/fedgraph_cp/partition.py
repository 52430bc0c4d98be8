"""Balanced min-cut partitioning into K client subgraphs.

Two single-level initialisers are available:

``spectral`` (default)
    recursive bisection along the Fiedler vector of the normalised adjacency,
    each split sized proportionally to the number of parts it must host.
``fennel``
    one seeded BFS-ordered stream through the Fennel greedy rule (neighbours
    already in the part minus a convex size penalty, hard capacity cap).

Either start is refined by k-way boundary passes: nodes are moved greedily by
gain while respecting the size bounds, negative-gain moves are allowed inside a
pass to climb out of local minima, and each pass is rolled back to its best
prefix, so the cut never increases from one pass to the next.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from .errors import ConfigurationError
from .graph import Graph

log = logging.getLogger(__name__)

_NEG = np.iinfo(np.int64).min


@dataclass(frozen=True, eq=False)
class ClientGraph:
    graph: Graph
    global_ids: np.ndarray  # local i -> global id


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    K: int
    cut_edges: np.ndarray
    clients: list[ClientGraph]
    total_edges: int
    cut_history: list[int] = field(default_factory=list)

    def client_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)


def size_bounds(n: int, K: int, imbalance: float) -> tuple[int, int]:
    """Inclusive (lo, hi) client-size bounds; always admits floor/ceil(n/K)."""
    target, slack = n / K, imbalance * n / K
    lo = min(math.ceil(target - slack - 1e-9), n // K)
    hi = max(math.floor(target + slack + 1e-9), -(-n // K))
    return max(lo, 0), hi


def _csr(n: int, edges: np.ndarray):
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.argsort(src, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return np.cumsum(indptr), dst[order]


def cut_size(edges: np.ndarray, assignment: np.ndarray) -> int:
    if edges.size == 0:
        return 0
    return int(np.sum(assignment[edges[:, 0]] != assignment[edges[:, 1]]))


# ------------------------------------------------------------------ initialisers


def _fiedler(A: sp.csr_matrix, nodes: np.ndarray, rng) -> np.ndarray:
    sub = A[nodes][:, nodes]
    deg = np.asarray(sub.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    scale = sp.diags(1.0 / np.sqrt(deg))
    M = scale @ sub @ scale
    if nodes.size <= 64:
        _, vecs = np.linalg.eigh(M.toarray())
        vec = vecs[:, -2]
    else:
        vals, vecs = eigsh(M, k=2, which="LA", v0=rng.random(nodes.size), tol=1e-8)
        vec = vecs[:, int(np.argmin(vals))]
    return vec / np.sqrt(deg)


def _spectral(A, nodes, K, rng, out, base=0):
    if K == 1:
        out[nodes] = base
        return
    k1 = K // 2
    n1 = int(round(nodes.size * k1 / K))
    f = _fiedler(A, nodes, rng) if nodes.size > 2 else np.arange(nodes.size, dtype=float)
    order = np.argsort(f, kind="stable")
    _spectral(A, nodes[order[:n1]], k1, rng, out, base)
    _spectral(A, nodes[order[n1:]], K - k1, rng, out, base + k1)


def _bfs_order(n, indptr, indices, rng) -> list[int]:
    seen = np.zeros(n, dtype=bool)
    order = []
    for start in rng.permutation(n):
        if seen[start] or indptr[start + 1] == indptr[start]:
            continue
        seen[start] = True
        q = deque([int(start)])
        while q:
            u = q.popleft()
            order.append(u)
            for v in rng.permutation(indices[indptr[u] : indptr[u + 1]]):
                if not seen[v]:
                    seen[v] = True
                    q.append(int(v))
    return order


def _fennel(n, m, K, indptr, indices, order, hi, gamma=1.5):
    alpha = math.sqrt(K) * m / max(n, 1) ** gamma
    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(K, dtype=np.int64)
    for u in order:
        nb = assign[indices[indptr[u] : indptr[u + 1]]]
        counts = np.bincount(nb[nb >= 0], minlength=K).astype(float)
        score = counts - alpha * gamma * sizes ** (gamma - 1)
        score[sizes >= hi] = -np.inf
        k = int(np.argmax(score))  # first maximum -> lowest client id
        assign[u] = k
        sizes[k] += 1
    return assign


# -------------------------------------------------------------------- refinement


class _Refiner:
    def __init__(self, assign, indptr, indices, K, lo, hi):
        self.assign = assign
        self.indptr, self.indices = indptr, indices
        self.K, self.lo, self.hi = K, lo, hi
        n = assign.size
        self.sizes = np.bincount(assign, minlength=K)
        self.conn = np.zeros((n, K), dtype=np.int64)
        src = np.repeat(np.arange(n), np.diff(indptr))
        np.add.at(self.conn, (src, assign[indices]), 1)

    def _nbrs(self, u):
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def _move(self, u, b):
        a = self.assign[u]
        self.assign[u] = b
        self.sizes[a] -= 1
        self.sizes[b] += 1
        nb = self._nbrs(u)
        np.subtract.at(self.conn, (nb, a), 1)
        np.add.at(self.conn, (nb, b), 1)

    def _best(self, u, balanced: bool):
        a = self.assign[u]
        gains = self.conn[u] - self.conn[u, a]
        gains[a] = _NEG
        if balanced:
            if self.sizes[a] <= self.lo:
                return _NEG, -1
            gains[self.sizes >= self.hi] = _NEG
        b = int(np.argmax(gains))  # first maximum -> lowest client id
        return int(gains[b]), b

    def fm_pass(self, rng, max_stall: int = 100) -> int:
        """One hill-climbing pass; returns the (non-negative) cut reduction kept."""
        n = self.assign.size
        tie = rng.random(n)
        locked = np.zeros(n, dtype=bool)
        heap = []
        boundary = self.conn.sum(axis=1) > self.conn[np.arange(n), self.assign]
        for u in np.flatnonzero(boundary):
            g, _ = self._best(u, balanced=False)
            heapq.heappush(heap, (-g, tie[u], int(u)))
        moves, total, best_total, best_len, stall = [], 0, 0, 0, 0
        while heap and stall < max_stall:
            neg, _, u = heapq.heappop(heap)
            if locked[u]:
                continue
            g, b = self._best(u, balanced=False)
            if -neg != g:
                heapq.heappush(heap, (-g, tie[u], u))
                continue
            locked[u] = True
            g, b = self._best(u, balanced=True)
            if b < 0 or g == _NEG:
                continue
            a = int(self.assign[u])
            self._move(u, b)
            moves.append((u, a))
            total += g
            if total > best_total:
                best_total, best_len, stall = total, len(moves), 0
            else:
                stall += 1
            for v in np.unique(self._nbrs(u)):
                if not locked[v]:
                    gv, _ = self._best(v, balanced=False)
                    heapq.heappush(heap, (-gv, tie[v], int(v)))
        for u, a in reversed(moves[best_len:]):
            self._move(u, a)
        return best_total

    def rebalance(self):
        # push nodes out of over-full / into under-full parts at least cut cost
        while True:
            over = np.flatnonzero(self.sizes > self.hi)
            under = np.flatnonzero(self.sizes < self.lo)
            if over.size == 0 and under.size == 0:
                return
            src = over if over.size else np.flatnonzero(self.sizes > self.lo)
            dst = under if under.size else np.flatnonzero(self.sizes < self.hi)
            cand = np.flatnonzero(np.isin(self.assign, src))
            if cand.size == 0 or dst.size == 0:
                raise ConfigurationError("cannot satisfy balance constraint")
            own = self.conn[cand, self.assign[cand]]
            gain = self.conn[cand][:, dst] - own[:, None]
            i, j = np.unravel_index(int(np.argmax(gain)), gain.shape)
            self._move(int(cand[i]), int(dst[j]))


def partition_graph(
    g: Graph,
    K: int,
    seed: int = 0,
    imbalance: float = 0.05,
    init: str = "spectral",
    max_passes: int = 30,
) -> Partition:
    """Split ``g`` into ``K`` balanced clients with a small edge cut."""
    n = g.n
    if not 1 <= K <= n:
        raise ConfigurationError(f"need 1 <= K <= n, got K={K}, n={n}")
    if imbalance < 0:
        raise ConfigurationError("imbalance must be non-negative")
    lo, hi = size_bounds(n, K, imbalance)
    rng = np.random.default_rng(seed)
    indptr, indices = _csr(n, g.edges)
    deg = np.diff(indptr)
    linked = np.flatnonzero(deg > 0)

    assign = np.full(n, -1, dtype=np.int64)
    if K == 1:
        assign[:] = 0
    elif init == "spectral":
        if linked.size:
            parts = min(K, linked.size)
            _spectral(g.adjacency(), linked, parts, rng, assign)
    elif init == "fennel":
        order = _bfs_order(n, indptr, indices, rng)
        assign[linked] = _fennel(n, g.num_edges, K, indptr, indices, order, hi)[linked]
    else:
        raise ConfigurationError(f"unknown init {init!r}")

    # isolated nodes: round-robin over clients with room
    sizes = np.bincount(assign[assign >= 0], minlength=K)
    k = 0
    for u in np.flatnonzero(assign < 0):
        while sizes[k % K] >= hi:
            k += 1
        assign[u] = k % K
        sizes[k % K] += 1
        k += 1

    ref = _Refiner(assign, indptr, indices, K, lo, hi)
    ref.rebalance()
    history = [cut_size(g.edges, assign)]
    if K > 1:
        for _ in range(max_passes):
            kept = ref.fm_pass(rng)
            history.append(cut_size(g.edges, assign))
            assert history[-1] <= history[-2], "refinement increased the cut"
            if kept <= 0:
                break
    return build_partition(g, assign, K, history)


def build_partition(g: Graph, assignment, K: int, history=None) -> Partition:
    assignment = np.asarray(assignment, dtype=np.int64)
    clients = []
    for k in range(K):
        ids = np.flatnonzero(assignment == k)
        clients.append(ClientGraph(g.subgraph(ids), ids))
    e = g.edges
    cut = e[assignment[e[:, 0]] != assignment[e[:, 1]]] if e.size else e
    return Partition(assignment, K, cut, clients, g.num_edges, list(history or []))


def missing_edge_report(p: Partition) -> tuple[int, float]:
    """(number of cut edges, cut edges as a fraction of all edges)."""
    cut = int(p.cut_edges.shape[0])
    return cut, (cut / p.total_edges if p.total_edges else 0.0)


def write_partition(p: Partition, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([np.arange(p.assignment.size), p.assignment]), fmt="%d", delimiter="\t")
    return path


def read_partition(path) -> np.ndarray:
    data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    out = np.empty(data.shape[0], dtype=np.int64)
    out[data[:, 0]] = data[:, 1]
    return out
