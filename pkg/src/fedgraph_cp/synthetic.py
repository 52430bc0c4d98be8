"""Synthetic benchmark graphs.

``citation_graph`` is a stand-in for Planetoid-style citation datasets when the
real files are unavailable: small topical communities laid out in a latent
plane, heavy-tailed degrees, distance-decaying links between communities and
sparse binary bag-of-words features driven by the node's class and community.
The defaults give Cora-sized output (about 2.5k nodes, 5k edges, 7 classes,
1433 features).
"""

from __future__ import annotations

import numpy as np

from .graph import Graph, largest_component

# Class proportions of the Cora citation graph.
CORA_CLASS_SHARES = (0.302, 0.157, 0.154, 0.130, 0.110, 0.080, 0.066)


def _assign_classes(pos: np.ndarray, sizes: np.ndarray, shares, rng) -> np.ndarray:
    # Grow each class as a spatial region around an anchor community until it
    # holds its share of nodes; keeps inter-class boundaries geographic.
    C = pos.shape[0]
    L = len(shares)
    target = np.asarray(shares) / np.sum(shares) * sizes.sum()
    cls = np.full(C, -1)
    filled = np.zeros(L)
    anchors = rng.choice(C, size=L, replace=False)
    for k, a in enumerate(anchors):
        cls[a] = k
        filled[k] += sizes[a]
    while np.any(cls < 0):
        k = int(np.argmin(filled / target))
        free = np.flatnonzero(cls < 0)
        mine = np.flatnonzero(cls == k)
        dist = np.linalg.norm(pos[free][:, None, :] - pos[mine][None, :, :], axis=2).min(axis=1)
        c = free[int(np.argmin(dist))]
        cls[c] = k
        filled[k] += sizes[c]
    return cls


def citation_graph(
    n: int = 2485,
    num_edges: int = 5069,
    num_classes: int = 7,
    d: int = 1433,
    community_size: int = 30,
    p_intra: float = 0.72,
    link_scale: float = 0.08,
    label_noise: float = 0.12,
    words_per_node: float = 18.0,
    class_word_share: float = 0.12,
    comm_word_share: float = 0.15,
    seed: int = 0,
    restrict_lcc: bool = True,
) -> Graph:
    rng = np.random.default_rng(seed)
    shares = CORA_CLASS_SHARES if num_classes == 7 else np.ones(num_classes)

    C = max(num_classes, n // community_size)
    comm = np.sort(rng.integers(0, C, size=n))
    comm[:C] = np.arange(C)  # every community non-empty
    comm = np.sort(comm)
    sizes = np.bincount(comm, minlength=C)
    pos = rng.random((C, 2))
    comm_class = _assign_classes(pos, sizes, shares, rng)

    cdist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    near = np.argsort(cdist, axis=1)[:, 1:4]
    labels = comm_class[comm].copy()
    flip = rng.random(n) < label_noise
    labels[flip] = comm_class[near[comm[flip], rng.integers(0, 3, size=flip.sum())]]

    theta = rng.pareto(2.2, size=n) + 1.0
    members = [np.flatnonzero(comm == c) for c in range(C)]
    member_p = [theta[m] / theta[m].sum() for m in members]
    link = np.exp(-cdist / link_scale)
    np.fill_diagonal(link, 0.0)
    link /= link.sum(axis=1, keepdims=True)
    src_p = theta / theta.sum()

    edges: set[tuple[int, int]] = set()
    while len(edges) < num_edges:
        batch = num_edges - len(edges)
        us = rng.choice(n, size=batch, p=src_p)
        intra = rng.random(batch) < p_intra
        for u, same in zip(us, intra):
            cu = comm[u]
            c = cu if same else rng.choice(C, p=link[cu])
            v = members[c][rng.choice(members[c].size, p=member_p[c])]
            if u != v:
                edges.add((min(u, v), max(u, v)))

    # sparse binary bag-of-words
    topic_size, sub_size = 60, 15
    class_words = [rng.choice(d, size=topic_size, replace=False) for _ in range(num_classes)]
    comm_words = [rng.choice(d, size=sub_size, replace=False) for _ in range(C)]
    background = 1.0 / np.arange(1, d + 1) ** 0.9
    background = rng.permutation(background / background.sum())
    X = np.zeros((n, d))
    counts = rng.poisson(words_per_node, size=n) + 1
    cut1, cut2 = class_word_share, class_word_share + comm_word_share
    for v in range(n):
        k = counts[v]
        src = rng.random(k)
        w_class = class_words[labels[v]][rng.integers(0, topic_size, size=int((src < cut1).sum()))]
        w_comm = comm_words[comm[v]][rng.integers(0, sub_size, size=int(((src >= cut1) & (src < cut2)).sum()))]
        w_bg = rng.choice(d, size=int((src >= cut2).sum()), p=background)
        X[v, np.concatenate([w_class, w_comm, w_bg])] = 1.0

    g = Graph(X, np.array(sorted(edges), dtype=np.int64), labels, num_classes)
    if restrict_lcc:
        g, _ = largest_component(g)
    return g


def path_graph(n: int, d: int = 1, num_classes: int = 2) -> Graph:
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Graph(np.ones((n, d)), edges, np.arange(n) % num_classes, num_classes)


def random_graph(n: int, p: float, d: int, num_classes: int, seed: int = 0) -> Graph:
    """Erdos-Renyi graph with Gaussian features and uniform labels (test fixture)."""
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, k=1)
    keep = rng.random(iu[0].size) < p
    edges = np.column_stack([iu[0][keep], iu[1][keep]])
    labels = rng.integers(0, num_classes, size=n)
    labels[:num_classes] = np.arange(num_classes)
    return Graph(rng.normal(size=(n, d)), edges, labels, num_classes)


def two_community_graph(
    n_per: int = 60,
    d: int = 8,
    p_in: float = 0.15,
    p_out: float = 0.01,
    feature_signal: float = 1.0,
    seed: int = 0,
) -> Graph:
    """Planted two-block graph; label = block, features = noisy block indicator."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per
    labels = np.repeat([0, 1], n_per)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper)
    X = rng.normal(size=(n, d))
    X[:, 0] += feature_signal * (2 * labels - 1)
    return Graph(X, edges, labels, 2)
