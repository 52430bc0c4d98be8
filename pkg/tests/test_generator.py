from __future__ import annotations

import math

import numpy as np
import pytest

from fedgraph_cp.errors import ConfigurationError
from fedgraph_cp.federation import PROTO_PHASE, VGAE_PHASE, CommsLedger
from fedgraph_cp.generator import (
    GenConfig,
    aggregate_and_broadcast,
    generate_missing_neighbors,
    kmeans,
    make_prototypes,
    predict_and_augment,
    top_pairs,
    train_vae,
)
from fedgraph_cp.models import VgaeModel, gcn_norm_adj
from fedgraph_cp.nn import sigmoid
from fedgraph_cp.synthetic import random_graph

SMALL = GenConfig(
    protos_per_client=2,
    edge_top_p=0.05,
    vae_hidden=8,
    vae_latent=4,
    vae_epochs=3,
    vae_batch=8,
    vgae_hidden=8,
    vgae_latent=4,
    vgae_rounds=3,
)


class IdentityVae:
    """Stands in for a trained VAE whose reconstruction is the input itself."""

    def reconstruct(self, X):
        return np.asarray(X, dtype=np.float64)


# --------------------------------------------------------------------- k-means


def test_single_prototype_is_mean_of_reconstructions():
    rng = np.random.default_rng(0)
    X = (rng.random((30, 6)) < 0.4).astype(float)
    vae, _ = train_vae(X, SMALL, rng)
    c = make_prototypes(X, vae, 1, seed=3)
    assert c.shape == (1, 6)
    assert np.allclose(c[0], vae.reconstruct(X).mean(axis=0), rtol=0, atol=1e-12)


def test_two_blobs_recover_blob_means():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 3)) * 0.1
    b = rng.normal(size=(25, 3)) * 0.1 + 10.0
    X = np.vstack([a, b])
    c = make_prototypes(X, IdentityVae(), 2, seed=0)
    c = c[np.argsort(c[:, 0])]
    assert np.abs(c[0] - a.mean(axis=0)).max() <= 1e-6
    assert np.abs(c[1] - b.mean(axis=0)).max() <= 1e-6


def test_kmeans_deterministic_and_bounded():
    X = np.random.default_rng(2).normal(size=(60, 4))
    a, la = kmeans(X, 5, np.random.default_rng(9))
    b, lb = kmeans(X, 5, np.random.default_rng(9))
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    # Lloyd fixed point: every centre is the mean of its members
    for m in range(5):
        if np.any(la == m):
            assert np.allclose(a[m], X[la == m].mean(axis=0), atol=1e-3)


def test_too_many_prototypes():
    X = np.zeros((3, 2))
    with pytest.raises(ConfigurationError):
        make_prototypes(X, IdentityVae(), 4, seed=0)
    with pytest.raises(ConfigurationError):
        kmeans(X, 0, np.random.default_rng(0))


def test_kmeans_identical_points():
    c, lab = kmeans(np.ones((5, 2)), 3, np.random.default_rng(0))
    assert np.all(c == 1.0)


# ------------------------------------------------------------------ aggregate


def test_aggregate_single_client_has_no_foreign():
    pool = aggregate_and_broadcast([np.ones((3, 4))])
    feats, idx = pool.foreign(0)
    assert feats.shape == (0, 4) and idx.size == 0


def test_aggregate_ledger_and_rows():
    rng = np.random.default_rng(0)
    protos = [rng.normal(size=(2, 4)) for _ in range(3)]
    led = CommsLedger()
    pool = aggregate_and_broadcast(protos, led)
    assert led.total(PROTO_PHASE) == 48 == 2 * 3 * 2 * 4
    assert pool.features.shape == (6, 4)
    assert np.array_equal(pool.features, np.vstack(protos))
    feats, idx = pool.foreign(1)
    assert idx.tolist() == [0, 1, 4, 5]
    assert np.array_equal(feats, np.vstack([protos[0], protos[2]]))


def test_aggregate_uneven_counts():
    pool = aggregate_and_broadcast([np.ones((1, 2)), np.ones((4, 2)), np.ones((2, 2))])
    assert pool.features.shape[0] == 7
    assert pool.owners.tolist() == [0, 1, 1, 1, 1, 2, 2]
    with pytest.raises(ConfigurationError):
        aggregate_and_broadcast([])


# -------------------------------------------------------------------- augment


def vgae_setup(n=20, P=5, d=6, seed=0):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.15, d, 2, seed=seed)
    params = VgaeModel.init_params(d, rng, 8, 4)
    X_hat = rng.random((P, d))
    return g, X_hat, params


def pair_probs(g, X_hat, params):
    """Independent evaluation of the (prototype, node) probability matrix."""
    n = g.n
    model = VgaeModel(gcn_norm_adj(n + X_hat.shape[0], g.edges), params.copy())
    mu = model.encode(np.vstack([g.features, X_hat]))[0]
    return sigmoid(mu[n:] @ mu[:n].T)


def test_top_p_matches_full_sort():
    g, X_hat, params = vgae_setup()
    aug = predict_and_augment(g, X_hat, params, 0.04)
    assert aug.new_edges.shape == (4, 2)
    probs = pair_probs(g, X_hat, params)
    pairs = sorted(((-probs[i, j], i, j) for i in range(5) for j in range(20)))[:4]
    want = {(i, j) for _, i, j in pairs}
    got = {(int(aug.proto_index[p - g.n]), int(v)) for p, v in aug.new_edges}
    assert got == want


def test_p_one_links_every_pair():
    g, X_hat, params = vgae_setup()
    aug = predict_and_augment(g, X_hat, params, 1.0)
    assert aug.new_edges.shape[0] == 100
    assert aug.n_prototypes == 5
    assert aug.graph.n == g.n + 5


def test_single_pair_is_argmax():
    g, X_hat, params = vgae_setup()
    aug = predict_and_augment(g, X_hat, params, 0.001)
    probs = pair_probs(g, X_hat, params)
    i, j = np.unravel_index(np.argmax(probs), probs.shape)
    assert aug.new_edges.shape[0] == 1
    assert (int(aug.proto_index[0]), int(aug.new_edges[0, 1])) == (i, j)


def test_p_zero_and_no_pairs_leave_graph_unchanged():
    g, X_hat, params = vgae_setup()
    for aug in (predict_and_augment(g, X_hat, params, 0.0), predict_and_augment(g, X_hat[:0], params, 0.5)):
        assert aug.graph is g
        assert aug.n_prototypes == 0 and aug.new_edges.shape == (0, 2)
    with pytest.raises(ConfigurationError):
        predict_and_augment(g, X_hat, params, 1.5)


def test_original_edges_preserved_and_new_edges_touch_prototypes():
    g, X_hat, params = vgae_setup(seed=3)
    aug = predict_and_augment(g, X_hat, params, 0.3, pool_index=np.arange(10, 15))
    old = {tuple(e) for e in g.edges.tolist()}
    new = {tuple(e) for e in aug.graph.edges.tolist()}
    assert old <= new
    assert len(new) == len(old) + aug.new_edges.shape[0]
    for a, b in new - old:
        assert (a >= g.n) != (b >= g.n)
    assert np.all(aug.proto_index >= 10)
    assert np.array_equal(aug.graph.features[: g.n], g.features)


def test_top_pairs_tie_break():
    probs = np.full((2, 3), 0.5)
    assert top_pairs(probs, 4).tolist() == [0, 1, 2, 3]


# -------------------------------------------------------------------- pipeline


def small_clients(K=3):
    graphs = [random_graph(25, 0.12, 6, 2, seed=10 + k) for k in range(K)]
    rows = [np.arange(15) for _ in range(K)]
    return graphs, rows


def test_pipeline_deterministic_across_schedules():
    graphs, rows = small_clients()
    a = generate_missing_neighbors(graphs, rows, SMALL, seed=4, workers=1)
    b = generate_missing_neighbors(graphs, rows, SMALL, seed=4, workers=3)
    assert np.array_equal(a.pool.features, b.pool.features)
    assert np.array_equal(a.vgae_params.data, b.vgae_params.data)
    for x, y in zip(a.augmented, b.augmented):
        assert np.array_equal(x.graph.edges, y.graph.edges)
        assert np.array_equal(x.graph.features, y.graph.features)


def test_pipeline_ledger_and_counts():
    graphs, rows = small_clients()
    res = generate_missing_neighbors(graphs, rows, SMALL, seed=0)
    assert res.ledger.total(PROTO_PHASE) == 2 * 3 * 2 * 6
    assert res.ledger.total(VGAE_PHASE) == 2 * 3 * res.vgae_params.size * SMALL.vgae_rounds
    assert res.pool.features.shape == (6, 6)
    pairs = 4 * 25
    for k, aug in enumerate(res.augmented):
        assert aug.new_edges.shape[0] == math.ceil(SMALL.edge_top_p * pairs)
        assert np.all(res.pool.owners[aug.proto_index] != k)
    assert res.vae_steps == [SMALL.vae_epochs * math.ceil(15 / SMALL.vae_batch)] * 3


def test_dp_prototypes_run_with_calibrated_noise():
    graphs, rows = small_clients(2)
    cfg = GenConfig(**{**SMALL.__dict__, "dp_epsilon": 4.0})
    dp = cfg.dp_for(15)
    steps = cfg.vae_epochs * math.ceil(15 / cfg.vae_batch)
    assert dp.enabled and dp.epsilon(steps) == pytest.approx(4.0)
    res = generate_missing_neighbors(graphs, rows, cfg, seed=0)
    assert np.all(np.isfinite(res.pool.features))
