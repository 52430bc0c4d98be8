"""Graph container, role splits and the on-disk dataset format.

A dataset directory holds three plain-text files::

    features.tsv   node-id <TAB> f_1 <TAB> ... <TAB> f_d
    edges.txt      node-id node-id          (whitespace separated, undirected)
    labels.tsv     node-id <TAB> class-id

Node ids may be arbitrary non-negative integers; they are compacted to
``[0, n)`` (in ascending original-id order) after restricting the graph to its
largest connected component.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ConfigurationError, FormatError, IntegrityError

log = logging.getLogger(__name__)

FEATURES_FILE = "features.tsv"
EDGES_FILE = "edges.txt"
LABELS_FILE = "labels.tsv"


def canonical_edges(edges, n: int | None = None) -> np.ndarray:
    """Return edges as a sorted ``(m, 2)`` int array with ``u < v``, deduplicated.

    Raises IntegrityError on self-loops or (when ``n`` is given) out-of-range ids.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if np.any(e[:, 0] == e[:, 1]):
        bad = e[e[:, 0] == e[:, 1]][0]
        raise IntegrityError(f"self-loop on node {int(bad[0])}")
    if np.any(e < 0) or (n is not None and np.any(e >= n)):
        raise IntegrityError(f"edge endpoint outside [0, {n})")
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with integer class labels."""

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise IntegrityError("feature matrix must be 2-D")
        n = x.shape[0]
        if not np.all(np.isfinite(x)):
            raise IntegrityError("non-finite feature value")
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (n,):
            raise IntegrityError(f"expected {n} labels, got {y.shape[0]}")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise IntegrityError(f"label outside [0, {self.num_classes})")
        e = canonical_edges(self.edges, n)
        x.setflags(write=False)
        y.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "edges", e)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix (no self-loops)."""
        return adjacency_matrix(self.n, self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def subgraph(self, nodes) -> Graph:
        """Induced subgraph on ``nodes``; local id ``i`` is ``nodes[i]``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        e = remap[self.edges]
        keep = (e >= 0).all(axis=1)
        return Graph(self.features[nodes], e[keep], self.labels[nodes], self.num_classes)

    def permuted(self, perm) -> Graph:
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return Graph(self.features[perm], inv[self.edges], self.labels[perm], self.num_classes)


def adjacency_matrix(n: int, edges: np.ndarray) -> sp.csr_matrix:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    data = np.ones(rows.size, dtype=np.float64)
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def largest_component(g: Graph) -> tuple[Graph, np.ndarray]:
    """Restrict ``g`` to its largest connected component.

    Returns the subgraph and the kept node ids (ascending). Ties between equally
    large components go to the one containing the smallest node id.
    """
    if g.n == 0:
        return g, np.zeros(0, dtype=np.int64)
    ncomp, comp = connected_components(g.adjacency(), directed=False)
    if ncomp == 1:
        return g, np.arange(g.n)
    sizes = np.bincount(comp)
    best = int(np.argmax(sizes))  # argmax returns the first, i.e. lowest-id component
    keep = np.flatnonzero(comp == best)
    return g.subgraph(keep), keep


# --------------------------------------------------------------------------- IO


def _read_rows(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def _parse_int(path, lineno, tok) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise FormatError(path, lineno, f"expected integer id, got {tok!r}") from None
    if v < 0:
        raise FormatError(path, lineno, f"negative id {v}")
    return v


def load_graph(data_dir, restrict_lcc: bool = True) -> Graph:
    """Load a dataset directory (see module docstring) into a validated Graph."""
    data_dir = Path(data_dir)
    fpath, epath, lpath = data_dir / FEATURES_FILE, data_dir / EDGES_FILE, data_dir / LABELS_FILE
    for p in (fpath, epath, lpath):
        if not p.exists():
            raise FileNotFoundError(p)

    ids, rows = [], []
    width = None
    for lineno, parts in _read_rows(fpath):
        nid = _parse_int(fpath, lineno, parts[0])
        try:
            vals = np.array(parts[1:], dtype=np.float64)
        except ValueError:
            raise FormatError(fpath, lineno, "non-numeric feature value") from None
        if width is None:
            width = vals.size
        elif vals.size != width:
            raise FormatError(fpath, lineno, f"expected {width} features, got {vals.size}")
        ids.append(nid)
        rows.append(vals)
    if not ids:
        raise FormatError(fpath, 0, "no feature rows")
    id_arr = np.array(ids, dtype=np.int64)
    if np.unique(id_arr).size != id_arr.size:
        raise IntegrityError(f"{fpath}: duplicate node id")
    order = np.argsort(id_arr, kind="stable")
    id_arr = id_arr[order]
    feats = np.vstack(rows)[order] if width else np.zeros((len(ids), 0))
    index = {int(v): i for i, v in enumerate(id_arr)}

    labels = np.full(id_arr.size, -1, dtype=np.int64)
    for lineno, parts in _read_rows(lpath):
        if len(parts) != 2:
            raise FormatError(lpath, lineno, "expected 'node-id class-id'")
        nid = _parse_int(lpath, lineno, parts[0])
        cls = _parse_int(lpath, lineno, parts[1])
        if nid not in index:
            raise IntegrityError(f"{lpath}:{lineno}: label for unknown node {nid}")
        labels[index[nid]] = cls
    if np.any(labels < 0):
        missing = int(id_arr[np.flatnonzero(labels < 0)[0]])
        raise IntegrityError(f"{lpath}: node {missing} has no label")

    edges = []
    for lineno, parts in _read_rows(epath):
        if len(parts) != 2:
            raise FormatError(epath, lineno, "expected two node ids")
        u = _parse_int(epath, lineno, parts[0])
        v = _parse_int(epath, lineno, parts[1])
        if u == v:
            raise IntegrityError(f"{epath}:{lineno}: self-loop on node {u}")
        if u not in index or v not in index:
            raise IntegrityError(f"{epath}:{lineno}: dangling edge endpoint ({u}, {v})")
        edges.append((index[u], index[v]))

    g = Graph(feats, np.array(edges, dtype=np.int64).reshape(-1, 2), labels, int(labels.max()) + 1)
    if restrict_lcc:
        g, kept = largest_component(g)
        if kept.size < id_arr.size:
            log.info("restricted %s to largest component: %d of %d nodes", data_dir, kept.size, id_arr.size)
    return g


def write_graph(g: Graph, data_dir) -> Path:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    ids = np.arange(g.n)
    np.savetxt(
        data_dir / FEATURES_FILE,
        np.column_stack([ids, g.features]) if g.d else ids[:, None],
        fmt=["%d"] + ["%.17g"] * g.d,
        delimiter="\t",
    )
    np.savetxt(data_dir / EDGES_FILE, g.edges, fmt="%d", delimiter=" ")
    np.savetxt(data_dir / LABELS_FILE, np.column_stack([ids, g.labels]), fmt="%d", delimiter="\t")
    return data_dir


# ------------------------------------------------------------------------ roles


class Role(IntEnum):
    TRAIN = 0
    VALID = 1
    CALIB = 2
    TEST = 3


@dataclass(frozen=True, eq=False)
class RoleMask:
    roles: np.ndarray

    def indices(self, role: Role) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    @property
    def train(self) -> np.ndarray:
        return self.indices(Role.TRAIN)

    @property
    def valid(self) -> np.ndarray:
        return self.indices(Role.VALID)

    @property
    def calib(self) -> np.ndarray:
        return self.indices(Role.CALIB)

    @property
    def test(self) -> np.ndarray:
        return self.indices(Role.TEST)

    def counts(self) -> dict[Role, int]:
        return {r: int(np.sum(self.roles == r)) for r in Role}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def role_counts(n: int, fractions=(0.2, 0.4, 0.4), valid_within_train: float = 0.2) -> dict[Role, int]:
    """Per-role node counts for ``n`` nodes; test absorbs the rounding remainder."""
    if len(fractions) != 3:
        raise ConfigurationError("fractions must be (train, calib, test)")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions {fractions} must be non-negative and sum to 1")
    share = _round_half_up(fractions[0] * n)
    valid = _round_half_up(valid_within_train * share)
    calib = _round_half_up(fractions[1] * n)
    counts = {
        Role.TRAIN: share - valid,
        Role.VALID: valid,
        Role.CALIB: calib,
        Role.TEST: n - share - calib,
    }
    empty = [r.name.lower() for r, c in counts.items() if c <= 0]
    if empty:
        raise ConfigurationError(f"n={n} too small for fractions {fractions}: empty {', '.join(empty)}")
    return counts


def roles_from_priority(priority: np.ndarray, counts: dict[Role, int]) -> RoleMask:
    """Assign roles by ascending priority: train share first (valid = its tail), then calib, test."""
    order = np.argsort(priority, kind="stable")
    share = counts[Role.TRAIN] + counts[Role.VALID]
    roles = np.empty(order.size, dtype=np.int8)
    roles[order[: counts[Role.TRAIN]]] = Role.TRAIN
    roles[order[counts[Role.TRAIN] : share]] = Role.VALID
    roles[order[share : share + counts[Role.CALIB]]] = Role.CALIB
    roles[order[share + counts[Role.CALIB] :]] = Role.TEST
    return RoleMask(roles)


def split_roles(g: Graph | int, fractions=(0.2, 0.4, 0.4), valid_within_train: float = 0.2, seed: int = 0) -> RoleMask:
    """Deterministic train/valid/calib/test split of ``g``'s nodes."""
    n = g if isinstance(g, int) else g.n
    counts = role_counts(n, fractions, valid_within_train)
    priority = np.random.default_rng(seed).random(n)
    return roles_from_priority(priority, counts)
