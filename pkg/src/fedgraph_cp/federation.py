"""In-process federated training: FedAvg, a message ledger and DP-SGD hooks.

Clients are simulated as tasks that own their data, a persistent Adam state and
a private RNG stream. Each round the server broadcasts the global vector, every
client runs its local epochs (optionally on a thread pool) and the server
averages the returned vectors in client-id order, so the result does not depend
on how the local work was scheduled.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FederationError
from .models import GcnModel, SageModel, VaeModel, VgaeModel, sample_negative_edges
from .nn import AdamState, ParamVector, adam_step

log = logging.getLogger(__name__)

MODEL_PHASE = "model-exchange"
PROTO_PHASE = "prototype-share"
VGAE_PHASE = "vgae-exchange"


# ---------------------------------------------------------------- comms ledger


@dataclass
class CommsLedger:
    """Scalars sent client->server (up) and server->client (down), per phase."""

    up: dict[str, int] = field(default_factory=dict)
    down: dict[str, int] = field(default_factory=dict)
    rounds: dict[str, int] = field(default_factory=dict)

    def record(self, phase: str, up: int, down: int) -> None:
        if up < 0 or down < 0:
            raise FederationError("ledger counters cannot decrease")
        self.up[phase] = self.up.get(phase, 0) + int(up)
        self.down[phase] = self.down.get(phase, 0) + int(down)

    def tick(self, phase: str) -> None:
        self.rounds[phase] = self.rounds.get(phase, 0) + 1

    def total(self, phase: str | None = None) -> int:
        phases = [phase] if phase else sorted(set(self.up) | set(self.down))
        return sum(self.up.get(p, 0) + self.down.get(p, 0) for p in phases)


# -------------------------------------------------------------------------- DP


def gaussian_epsilon(noise_multiplier: float, delta: float) -> float:
    """Per-step ε of the Gaussian mechanism with sensitivity C and std σC."""
    if noise_multiplier <= 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) / noise_multiplier


@dataclass(frozen=True)
class DpConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.enabled and not self.clip_norm > 0:
            raise ConfigurationError(f"DP clip norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")

    @classmethod
    def for_epsilon(cls, epsilon: float, delta: float, clip_norm: float, steps: int) -> DpConfig:
        """Noise multiplier whose basic-composition total over ``steps`` equals ``epsilon``."""
        if epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        sigma = max(steps, 1) * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon
        return cls(True, clip_norm, sigma, delta)

    def epsilon(self, steps: int) -> float:
        """Loose upper bound on ε after ``steps`` noised steps (basic composition)."""
        if not self.enabled:
            return math.inf
        return steps * gaussian_epsilon(self.noise_multiplier, self.delta)


def clip_factors(norms, clip_norm: float) -> np.ndarray:
    """Per-sample scale min(1, C / ‖g‖); exactly 1.0 when the clip does not bind."""
    norms = np.asarray(norms, dtype=np.float64)
    return np.minimum(1.0, clip_norm / np.maximum(norms, np.finfo(float).tiny))


def dp_noise(size: int, batch: int, dp: DpConfig, rng) -> np.ndarray | None:
    if dp.noise_multiplier == 0:
        return None
    return rng.normal(0.0, dp.noise_multiplier * dp.clip_norm, size=size) / batch


def dp_sgd_step(per_sample_grads, dp: DpConfig, rng) -> np.ndarray:
    """Clip each row to norm C, sum, add N(0, σ²C²) noise and divide by the batch size."""
    if not dp.enabled:
        raise ConfigurationError("dp_sgd_step called with DP disabled")
    if not dp.clip_norm > 0:
        raise ConfigurationError("clip norm must be positive")
    G = np.asarray(per_sample_grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ConfigurationError("per-sample gradients must be a non-empty B x P matrix")
    B = G.shape[0]
    clipped = G * clip_factors(np.linalg.norm(G, axis=1), dp.clip_norm)[:, None]
    assert np.all(np.linalg.norm(clipped, axis=1) <= dp.clip_norm * (1 + 1e-12))
    out = clipped.sum(axis=0) / B
    noise = dp_noise(G.shape[1], B, dp, rng)
    return out if noise is None else out + noise


# ---------------------------------------------------------------------- FedAvg


def fedavg_aggregate(params: list[ParamVector], weights=None) -> ParamVector:
    """Weighted mean of client vectors, summed in client-id order.

    Computed as θ_0 + Σ_k (w_k / W)(θ_k − θ_0), which returns θ_0 bit-for-bit
    when every client holds the same vector. A lone contributing client's
    vector is returned as is.
    """
    if not params:
        raise FederationError("no client parameters to aggregate")
    ref = params[0]
    for k, p in enumerate(params[1:], start=1):
        if not ref.same_layout(p):
            raise FederationError(f"client {k} parameter registry differs from client 0")
    w = np.ones(len(params)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(params),):
        raise FederationError("one weight per client required")
    if np.any(w < 0) or w.sum() <= 0:
        raise FederationError("weights must be non-negative with positive sum")
    nonzero = np.flatnonzero(w)
    if nonzero.size == 1:
        return params[int(nonzero[0])].copy()  # a + (b - a) need not round back to b
    total = w.sum()
    acc = ref.data.copy()
    for p, wk in zip(params, w):
        if wk:
            acc += (wk / total) * (p.data - ref.data)
    return ref.with_data(acc)


# ---------------------------------------------------------------- client tasks


class ClassifierTask:
    """Cross-entropy on one client's training nodes.

    Each epoch visits the training nodes in shuffled minibatches of
    ``batch_size`` (one Adam step per batch; the forward pass always covers the
    whole subgraph). ``batch_size=None`` takes one full-batch step instead.
    """

    supports_dp = False

    def __init__(self, model: GcnModel | SageModel, X, labels, rows, batch_size: int | None = None):
        if batch_size is not None and batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        self.model = model
        self.X, self.labels = X, labels
        self.rows = np.asarray(rows, dtype=np.int64)
        self.batch_size = batch_size

    @property
    def n_train(self) -> int:
        return int(self.rows.size)

    @property
    def params(self) -> ParamVector:
        return self.model.params

    def epoch(self, adam: AdamState, rng, weight_decay: float) -> float:
        if self.batch_size is None or self.batch_size >= self.rows.size:
            batches = [self.rows]
        else:
            order = self.rows[rng.permutation(self.rows.size)]
            batches = [order[i : i + self.batch_size] for i in range(0, order.size, self.batch_size)]
        total = 0.0
        for rows in batches:
            loss, g = self.model.loss_and_grad(self.X, self.labels, rows)
            adam_step(self.model.params, g, adam, weight_decay)
            total += loss * rows.size
        return total / max(self.rows.size, 1)


class VgaeTask:
    """Full-graph VGAE step with fresh negatives and reparameterisation noise."""

    supports_dp = False

    def __init__(self, model: VgaeModel, X, edges, neg_ratio: float = 1.0, kl_weight: float | None = None):
        self.model = model
        self.X = X
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.neg_ratio = neg_ratio
        self.kl_weight = kl_weight

    @property
    def n_train(self) -> int:
        return int(self.edges.shape[0])

    @property
    def params(self) -> ParamVector:
        return self.model.params

    def epoch(self, adam: AdamState, rng, weight_decay: float) -> float:
        n = self.model.n
        neg = sample_negative_edges(n, self.edges, int(round(self.neg_ratio * self.edges.shape[0])), rng)
        latent = self.model.params["W_mu"].shape[1]
        eps = rng.standard_normal((n, latent))
        res = self.model.loss_and_grad(self.X, self.edges, neg, eps, self.kl_weight)
        adam_step(self.model.params, res.grad, adam, weight_decay)
        return res.loss


class VaeTask:
    """Minibatch VAE training on feature rows, optionally with DP-SGD.

    Under DP the per-sample gradient norms come from the per-layer outer-product
    structure of the affine layers, so no per-sample gradient is materialised.
    """

    supports_dp = True

    def __init__(self, model: VaeModel, X, batch_size: int = 32, dp: DpConfig | None = None):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.batch_size = batch_size
        self.dp = dp or DpConfig()
        self.steps = 0
        self.max_clipped_norm = 0.0

    @property
    def n_train(self) -> int:
        return int(self.X.shape[0])

    @property
    def params(self) -> ParamVector:
        return self.model.params

    def epoch(self, adam: AdamState, rng, weight_decay: float) -> float:
        order = rng.permutation(self.n_train)
        losses = []
        for start in range(0, order.size, self.batch_size):
            batch = self.X[order[start : start + self.batch_size]]
            eps = rng.standard_normal((batch.shape[0], self.model.latent))
            if self.dp.enabled:
                probe = self.model.loss_and_grad(batch, eps, want_norms=True)
                c = clip_factors(probe.sample_norms, self.dp.clip_norm)
                clipped = c * probe.sample_norms
                assert np.all(clipped <= self.dp.clip_norm * (1 + 1e-9)), "per-sample clip violated"
                self.max_clipped_norm = max(self.max_clipped_norm, float(clipped.max()))
                res = self.model.loss_and_grad(batch, eps, sample_weights=c)
                noise = dp_noise(res.grad.size, batch.shape[0], self.dp, rng)
                g = res.grad if noise is None else res.grad + noise
            else:
                res = self.model.loss_and_grad(batch, eps)
                g = res.grad
            adam_step(self.model.params, g, adam, weight_decay)
            self.steps += 1
            losses.append(res.loss)
        return float(np.mean(losses))


# --------------------------------------------------------------------- driver


@dataclass
class FedResult:
    params: ParamVector
    ledger: CommsLedger
    losses: list[list[float]]  # per round, per participating client
    adam: list[AdamState | None]


def client_rng(seed: int, k: int, stream: int = 0):
    return np.random.default_rng([seed, stream, k])


def run_federated_training(
    tasks,
    init: ParamVector,
    rounds: int,
    local_epochs: int = 1,
    lr: float = 0.01,
    weight_decay: float = 0.0,
    weighting: str = "weighted",
    dp: DpConfig | None = None,
    seed: int = 0,
    stream: int = 0,
    workers: int = 1,
    ledger: CommsLedger | None = None,
    phase: str = MODEL_PHASE,
) -> FedResult:
    """R rounds of broadcast -> local epochs -> FedAvg over ``tasks``."""
    ledger = ledger if ledger is not None else CommsLedger()
    if rounds < 0 or local_epochs < 1:
        raise ConfigurationError("rounds must be >= 0 and local_epochs >= 1")
    if weighting not in ("weighted", "uniform"):
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    dp = dp or DpConfig()
    for k, t in enumerate(tasks):
        if not t.params.same_layout(init):
            raise FederationError(f"client {k} model registry differs from the global model")
        if dp.enabled:
            if not t.supports_dp:
                raise ConfigurationError(f"{type(t).__name__} does not support DP training")
            t.dp = dp
    active = [k for k, t in enumerate(tasks) if t.n_train > 0]
    for k in sorted(set(range(len(tasks))) - set(active)):
        log.warning("client %d has no training samples; skipped with weight 0", k)
    if not active and rounds > 0:
        raise FederationError("no client has training samples")

    rngs = {k: client_rng(seed, k, stream) for k in active}
    adams = {k: AdamState.zeros(init.size, lr=lr) for k in active}
    glob = init.copy()
    weights = np.array([tasks[k].n_train if weighting == "weighted" else 1.0 for k in active], dtype=np.float64)
    history: list[list[float]] = []

    def local(k):
        task = tasks[k]
        task.params.data[...] = glob.data
        losses = [task.epoch(adams[k], rngs[k], weight_decay) for _ in range(local_epochs)]
        return task.params.copy(), losses[-1]

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(rounds):
            ledger.record(phase, up=0, down=len(active) * glob.size)
            results = list(pool.map(local, active)) if pool else [local(k) for k in active]
            ledger.record(phase, up=len(active) * glob.size, down=0)
            ledger.tick(phase)
            glob = fedavg_aggregate([p for p, _ in results], weights)
            history.append([loss for _, loss in results])
    finally:
        if pool:
            pool.shutdown()
    for t in tasks:
        t.params.data[...] = glob.data
    return FedResult(glob, ledger, history, [adams.get(k) for k in range(len(tasks))])
