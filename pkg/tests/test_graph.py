from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgraph_cp.errors import ConfigurationError, FormatError, IntegrityError
from fedgraph_cp.graph import (
    Graph,
    Role,
    canonical_edges,
    largest_component,
    load_graph,
    role_counts,
    roles_from_priority,
    split_roles,
    write_graph,
)
from fedgraph_cp.synthetic import citation_graph, random_graph


def _write(dirpath, features, edges, labels):
    (dirpath / "features.tsv").write_text(features)
    (dirpath / "edges.txt").write_text(edges)
    (dirpath / "labels.tsv").write_text(labels)
    return dirpath


def test_single_node_graph(tmp_path):
    g = load_graph(_write(tmp_path, "0\t1.5\n", "", "0\t0\n"))
    assert g.n == 1 and g.num_edges == 0 and g.d == 1
    assert g.features[0, 0] == 1.5


def test_self_loop_is_integrity_error(tmp_path):
    _write(tmp_path, "3\t1\n4\t0\n", "3 3\n3 4\n", "3\t0\n4\t1\n")
    with pytest.raises(IntegrityError, match="self-loop"):
        load_graph(tmp_path)


def test_dangling_edge_is_integrity_error(tmp_path):
    _write(tmp_path, "0\t1\n1\t0\n", "0 1\n1 7\n", "0\t0\n1\t1\n")
    with pytest.raises(IntegrityError, match="dangling"):
        load_graph(tmp_path)


def test_parse_failure_names_line(tmp_path):
    _write(tmp_path, "0\t1\n1\tx\n", "0 1\n", "0\t0\n1\t1\n")
    with pytest.raises(FormatError) as err:
        load_graph(tmp_path)
    assert ":2" in str(err.value)


def test_ragged_features_rejected(tmp_path):
    _write(tmp_path, "0\t1\t2\n1\t0\n", "0 1\n", "0\t0\n1\t1\n")
    with pytest.raises(FormatError):
        load_graph(tmp_path)


def test_missing_label_rejected(tmp_path):
    _write(tmp_path, "0\t1\n1\t0\n", "0 1\n", "0\t0\n")
    with pytest.raises(IntegrityError):
        load_graph(tmp_path)


def test_ids_compacted_and_restricted_to_lcc(tmp_path):
    # component {10, 20, 30} plus an isolated pair {5, 6}
    _write(
        tmp_path,
        "30\t3\n10\t1\n20\t2\n5\t9\n6\t9\n",
        "10 20\n20 30\n5 6\n",
        "10\t0\n20\t1\n30\t0\n5\t1\n6\t1\n",
    )
    g = load_graph(tmp_path)
    assert g.n == 3
    assert g.features[:, 0].tolist() == [1.0, 2.0, 3.0]  # ascending original id
    assert {tuple(e) for e in g.edges} == {(0, 1), (1, 2)}
    assert load_graph(tmp_path, restrict_lcc=False).n == 5


def test_duplicate_and_reversed_edges_collapse():
    e = canonical_edges(np.array([[1, 0], [0, 1], [2, 1]]), 3)
    assert e.tolist() == [[0, 1], [1, 2]]


def test_graph_invariants_enforced():
    with pytest.raises(IntegrityError):
        Graph(np.zeros((2, 1)), np.array([[0, 1]]), np.array([0, 5]), 2)
    with pytest.raises(IntegrityError):
        Graph(np.array([[np.nan], [0.0]]), np.array([[0, 1]]), np.array([0, 1]), 2)
    with pytest.raises(IntegrityError):
        Graph(np.zeros((2, 1)), np.array([[0, 2]]), np.array([0, 1]), 2)


def test_round_trip(tmp_path):
    g = random_graph(30, 0.2, 5, 3, seed=4)
    g, _ = largest_component(g)
    h = load_graph(write_graph(g, tmp_path))
    assert h.n == g.n
    assert np.array_equal(h.edges, g.edges)
    assert np.array_equal(h.features, g.features)
    assert np.array_equal(h.labels, g.labels)


def test_split_counts_example():
    m = split_roles(100, (0.2, 0.4, 0.4), 0.2, seed=0)
    c = m.counts()
    assert (c[Role.TRAIN], c[Role.VALID], c[Role.CALIB], c[Role.TEST]) == (16, 4, 40, 40)


def test_split_deterministic():
    a, b = split_roles(57, seed=9), split_roles(57, seed=9)
    assert np.array_equal(a.roles, b.roles)
    assert not np.array_equal(a.roles, split_roles(57, seed=10).roles)


def test_split_too_small():
    with pytest.raises(ConfigurationError):
        split_roles(3)


def test_split_bad_fractions():
    with pytest.raises(ConfigurationError):
        split_roles(100, (0.5, 0.4, 0.4))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(15, 500), seed=st.integers(0, 10_000))
def test_split_partitions_nodes(n, seed):
    m = split_roles(n, seed=seed)
    assert m.roles.shape == (n,)
    assert set(np.unique(m.roles)) <= {int(r) for r in Role}
    c = m.counts()
    assert sum(c.values()) == n
    share = c[Role.TRAIN] + c[Role.VALID]
    assert abs(share - 0.2 * n) <= 1
    assert abs(c[Role.CALIB] - 0.4 * n) <= 1
    assert abs(c[Role.TEST] - 0.4 * n) <= 1
    assert abs(c[Role.VALID] - 0.2 * share) <= 1


@settings(max_examples=30, deadline=None)
@given(n=st.integers(15, 200), seed=st.integers(0, 1000), pseed=st.integers(0, 1000))
def test_split_permutation_equivariant(n, seed, pseed):
    # relabelling the nodes and permuting the priority draws permutes the mask
    counts = role_counts(n)
    pri = np.random.default_rng(seed).random(n)
    perm = np.random.default_rng(pseed).permutation(n)
    a = roles_from_priority(pri, counts).roles
    b = roles_from_priority(pri[perm], counts).roles
    assert np.array_equal(a[perm], b)


def test_permuted_graph_is_consistent():
    g = random_graph(15, 0.3, 3, 2, seed=2)
    perm = np.random.default_rng(0).permutation(g.n)
    h = g.permuted(perm)
    assert np.array_equal(h.features, g.features[perm])
    old = {tuple(sorted(e)) for e in g.edges.tolist()}
    new = {tuple(sorted((int(perm[u]), int(perm[v])))) for u, v in h.edges}
    assert old == new


def test_synthetic_is_cora_sized():
    g = citation_graph()
    assert g.num_classes == 7 and g.d == 1433
    assert 2200 <= g.n <= 2485
    assert 4500 <= g.num_edges <= 5069
    same = np.mean(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]])
    assert 0.7 <= same <= 0.9  # edge homophily in Cora's range
