from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgraph_cp.errors import ConfigurationError, FederationError
from fedgraph_cp.federation import (
    MODEL_PHASE,
    ClassifierTask,
    CommsLedger,
    DpConfig,
    VaeTask,
    VgaeTask,
    client_rng,
    clip_factors,
    dp_sgd_step,
    fedavg_aggregate,
    run_federated_training,
)
from fedgraph_cp.models import GcnModel, VaeModel, VgaeModel, make_classifier
from fedgraph_cp.nn import AdamState, ParamVector
from fedgraph_cp.synthetic import random_graph


def pv(*vals):
    return ParamVector([("w", (len(vals),))], np.array(vals, dtype=float))


# ---------------------------------------------------------------- aggregation


def test_fedavg_weighted_scalar():
    out = fedavg_aggregate([pv(0.0), pv(4.0)], [1, 3])
    assert out.data[0] == 3.0


def test_fedavg_identical_inputs_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=7)
    out = fedavg_aggregate([pv(*x), pv(*x), pv(*x)], [2, 5, 1])
    assert np.array_equal(out.data, x)


def test_fedavg_single_client_exact():
    x = pv(1e-17, 3.0, -1e300)
    assert np.array_equal(fedavg_aggregate([pv(1.0, 1.0, 1.0), x], [0, 4]).data, x.data)
    assert np.array_equal(fedavg_aggregate([x]).data, x.data)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 6))
def test_fedavg_matches_direct_weighted_mean(seed, K):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(K, 9))
    w = rng.integers(1, 50, size=K).astype(float)
    out = fedavg_aggregate([pv(*v) for v in vecs], w)
    oracle = (w[:, None] * vecs).sum(axis=0) / w.sum()
    assert np.allclose(out.data, oracle, rtol=0, atol=1e-12)


def test_fedavg_registry_mismatch():
    a = ParamVector([("w", (2,))])
    b = ParamVector([("v", (2,))])
    with pytest.raises(FederationError):
        fedavg_aggregate([a, b])
    with pytest.raises(FederationError):
        fedavg_aggregate([])
    with pytest.raises(FederationError):
        fedavg_aggregate([pv(1.0), pv(2.0)], [0, 0])


# ------------------------------------------------------------------- training


def classifier_clients(K, seed=0, batch_size=None, n=24):
    tasks = []
    rng = np.random.default_rng(seed)
    init = GcnModel.create(n, np.zeros((0, 2)), 5, 6, 3, rng).params
    for k in range(K):
        g = random_graph(n, 0.15, 5, 3, seed=seed * 100 + k)
        m = GcnModel.create(g.n, g.edges, 5, 6, 3, rng)
        tasks.append(ClassifierTask(m, g.features, g.labels, np.arange(n // 2), batch_size))
    return tasks, init


def test_zero_rounds_returns_init():
    tasks, init = classifier_clients(3)
    res = run_federated_training(tasks, init, 0)
    assert np.array_equal(res.params.data, init.data)
    assert res.ledger.total() == 0


@pytest.mark.parametrize("K,R", [(1, 1), (3, 4), (5, 2)])
def test_ledger_closed_form(K, R):
    tasks, init = classifier_clients(K)
    res = run_federated_training(tasks, init, R)
    assert res.ledger.total(MODEL_PHASE) == 2 * K * init.size * R
    assert res.ledger.rounds[MODEL_PHASE] == R


@pytest.mark.parametrize("batch_size", [None, 5])
def test_single_client_equals_local_training(batch_size):
    tasks, init = classifier_clients(1, seed=3, batch_size=batch_size)
    res = run_federated_training(tasks, init, 6, local_epochs=2, lr=0.01, weight_decay=1e-3, seed=7)

    [task] = classifier_clients(1, seed=3, batch_size=batch_size)[0]
    task.params.data[...] = init.data
    adam = AdamState.zeros(init.size, lr=0.01)
    rng = client_rng(7, 0)
    for _ in range(12):
        task.epoch(adam, rng, 1e-3)
    assert np.array_equal(res.params.data, task.params.data)


def test_minibatch_steps_per_epoch():
    tasks, init = classifier_clients(1, batch_size=5)
    res = run_federated_training(tasks, init, 2)
    assert res.adam[0].t == 2 * math.ceil(12 / 5)
    tasks, init = classifier_clients(1, batch_size=None)
    assert run_federated_training(tasks, init, 2).adam[0].t == 2


def test_scheduling_invariance():
    a_tasks, init = classifier_clients(4, seed=1, batch_size=4)
    b_tasks, _ = classifier_clients(4, seed=1, batch_size=4)
    a = run_federated_training(a_tasks, init, 5, seed=2, workers=1)
    b = run_federated_training(b_tasks, init, 5, seed=2, workers=4)
    assert np.array_equal(a.params.data, b.params.data)


def test_vgae_training_runs_and_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        init = VgaeModel.init_params(4, rng, hidden=6, latent=3)
        tasks = []
        for k in range(3):
            g = random_graph(15, 0.2, 4, 2, seed=k)
            tasks.append(VgaeTask(VgaeModel.create(g.n, g.edges, 4, rng, 6, 3), g.features, g.edges))
        return run_federated_training(tasks, init, 5, weighting="uniform", seed=1, stream=2)

    a, b = run(), run()
    assert np.array_equal(a.params.data, b.params.data)
    assert np.all(np.isfinite(a.params.data))


def test_empty_client_skipped():
    tasks, init = classifier_clients(3)
    tasks[1].rows = np.zeros(0, dtype=np.int64)
    res = run_federated_training(tasks, init, 2)
    assert res.ledger.total() == 2 * 2 * init.size * 2
    assert res.adam[1] is None


def test_registry_mismatch_rejected():
    tasks, init = classifier_clients(2)
    other = make_classifier("sage", 24, np.zeros((0, 2)), 5, 6, 3, np.random.default_rng(0)).params
    with pytest.raises(FederationError):
        run_federated_training(tasks, other, 1)


def test_bad_arguments():
    tasks, init = classifier_clients(1)
    with pytest.raises(ConfigurationError):
        run_federated_training(tasks, init, -1)
    with pytest.raises(ConfigurationError):
        run_federated_training(tasks, init, 1, weighting="median")
    with pytest.raises(ConfigurationError):
        run_federated_training(tasks, init, 1, dp=DpConfig(True, 1.0, 0.0))
    with pytest.raises(ConfigurationError):
        ClassifierTask(tasks[0].model, tasks[0].X, tasks[0].labels, tasks[0].rows, batch_size=0)


# ------------------------------------------------------------------------- DP


def test_dp_sigma_zero_within_clip_is_plain_mean():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(8, 5))
    G /= np.linalg.norm(G, axis=1, keepdims=True) * 2  # norms 0.5
    out = dp_sgd_step(G, DpConfig(True, 1.0, 0.0), rng)
    assert np.allclose(out, G.mean(axis=0), rtol=0, atol=1e-15)


def test_dp_clips_to_exact_norm():
    g = np.array([[6.0, 8.0]])  # norm 10 = 2C for C = 5
    out = dp_sgd_step(g, DpConfig(True, 5.0, 0.0), np.random.default_rng(0))
    assert np.linalg.norm(out) == pytest.approx(5.0, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), C=st.floats(0.01, 10.0))
def test_clip_factors_bound_norms(seed, C):
    rng = np.random.default_rng(seed)
    norms = np.abs(rng.normal(size=20)) * rng.choice([0.01, 1, 100])
    c = clip_factors(norms, C)
    assert np.all(c * norms <= C * (1 + 1e-12))
    assert np.all(c[norms <= C] == 1.0)


def test_dp_noise_std():
    sigma, C, B = 1.3, 0.7, 16
    rng = np.random.default_rng(0)
    G = np.zeros((B, 10_000))
    out = dp_sgd_step(G, DpConfig(True, C, sigma), rng)
    assert out.std() == pytest.approx(sigma * C / B, rel=0.05)


def test_dp_config_validation():
    with pytest.raises(ConfigurationError):
        DpConfig(True, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        DpConfig(True, -1.0, 1.0)
    with pytest.raises(ConfigurationError):
        DpConfig(True, 1.0, -0.5)
    with pytest.raises(ConfigurationError):
        dp_sgd_step(np.ones((2, 2)), DpConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("eps,steps", [(1.0, 10), (8.0, 400), (25.0, 3)])
def test_epsilon_round_trip(eps, steps):
    dp = DpConfig.for_epsilon(eps, 1e-5, 1.0, steps)
    assert dp.epsilon(steps) == pytest.approx(eps, rel=1e-12)
    assert DpConfig().epsilon(steps) == math.inf


def _vae_run(dp, noise_seed=0, epochs=3):
    rng = np.random.default_rng(0)
    X = (rng.random((40, 12)) < 0.3).astype(float)
    model = VaeModel.create(12, rng, hidden=6, latent=3)
    task = VaeTask(model, X, batch_size=8, dp=dp)
    adam = AdamState.zeros(model.params.size)
    run_rng = np.random.default_rng(noise_seed)
    for _ in range(epochs):
        task.epoch(adam, run_rng, 0.0)
    return model.params.data.copy(), task


def test_dp_sigma_zero_reproduces_non_dp_bitwise():
    base, _ = _vae_run(DpConfig())
    dp, task = _vae_run(DpConfig(True, 1e6, 0.0))
    assert np.array_equal(base, dp)
    assert task.steps == 3 * 5


def test_dp_clip_bound_holds_during_training():
    _, task = _vae_run(DpConfig(True, 0.05, 0.5))
    assert 0 < task.max_clipped_norm <= 0.05 * (1 + 1e-9)


def test_dp_noise_seeds_diverge():
    a, _ = _vae_run(DpConfig(True, 1.0, 1.0), noise_seed=1)
    b, _ = _vae_run(DpConfig(True, 1.0, 1.0), noise_seed=2)
    c, _ = _vae_run(DpConfig(True, 1.0, 0.0), noise_seed=1)
    d, _ = _vae_run(DpConfig(True, 1.0, 0.0), noise_seed=1)
    assert not np.array_equal(a, b)
    assert np.array_equal(c, d)


def test_ledger_rejects_negative():
    led = CommsLedger()
    with pytest.raises(FederationError):
        led.record("x", -1, 0)
