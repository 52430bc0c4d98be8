"""Missing-neighbour generation.

1. every client trains a feature VAE on its training nodes and clusters the
   reconstructions into M prototype vectors (k-means++);
2. the server concatenates all prototypes and broadcasts them;
3. a VGAE is trained federatedly on the client subgraphs;
4. each client scores (foreign prototype, local node) pairs with the global
   VGAE and links the top p fraction of pairs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .federation import (
    PROTO_PHASE,
    VGAE_PHASE,
    CommsLedger,
    DpConfig,
    VaeTask,
    VgaeTask,
    run_federated_training,
)
from .graph import Graph
from .models import VaeModel, VgaeModel, gcn_norm_adj, is_binary
from .nn import AdamState, ParamVector, sigmoid

log = logging.getLogger(__name__)


@dataclass
class GenConfig:
    protos_per_client: int = 5
    edge_top_p: float = 0.04
    vae_hidden: int = 64
    vae_latent: int = 32
    vae_epochs: int = 100
    vae_batch: int = 32
    vae_lr: float = 0.01
    rho: float = 0.1
    beta: float = 0.1
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    vgae_hidden: int = 64
    vgae_latent: int = 16
    vgae_rounds: int = 50
    vgae_local_epochs: int = 1
    vgae_lr: float = 0.01
    vgae_weighting: str = "uniform"
    neg_ratio: float = 1.0
    dp_epsilon: float = math.inf  # inf disables DP
    dp_delta: float = 1e-5
    dp_clip: float = 1.0

    def dp_for(self, n_train: int) -> DpConfig:
        """DP settings whose loose ε bound over the whole VAE run equals ``dp_epsilon``."""
        if math.isinf(self.dp_epsilon):
            return DpConfig()
        steps = self.vae_epochs * math.ceil(n_train / self.vae_batch)
        return DpConfig.for_epsilon(self.dp_epsilon, self.dp_delta, self.dp_clip, steps)


# --------------------------------------------------------------------- k-means


def kmeans_pp_init(X: np.ndarray, M: int, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # every point already coincides with a center
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(X, M: int, rng, max_iter: int = 300, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeding; returns (centers, assignment).

    Stops once the total squared centre shift falls below ``tol``. A cluster that
    empties keeps its previous centre.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= M <= X.shape[0]:
        raise ConfigurationError(f"need 1 <= M <= {X.shape[0]} points, got M={M}")
    C = kmeans_pp_init(X, M, rng)
    x2 = np.sum(X * X, axis=1)[:, None]
    assign = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        dist = x2 - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :]
        assign = np.argmin(dist, axis=1)
        new = C.copy()
        for m in range(M):
            members = assign == m
            if members.any():
                new[m] = X[members].mean(axis=0)
        shift = float(np.sum((new - C) ** 2))
        C = new
        if shift <= tol:
            break
    return C, assign


# ------------------------------------------------------------------ prototypes


def train_vae(X_train, cfg: GenConfig, rng, dp: DpConfig | None = None) -> tuple[VaeModel, VaeTask]:
    X_train = np.asarray(X_train, dtype=np.float64)
    vae = VaeModel.create(
        X_train.shape[1],
        rng,
        hidden=cfg.vae_hidden,
        latent=cfg.vae_latent,
        rho=cfg.rho,
        beta=cfg.beta,
        lambda_rec=cfg.lambda_rec,
        lambda_kl=cfg.lambda_kl,
        binary=is_binary(X_train),
    )
    task = VaeTask(vae, X_train, cfg.vae_batch, dp or cfg.dp_for(X_train.shape[0]))
    adam = AdamState.zeros(vae.params.size, lr=cfg.vae_lr)
    for _ in range(cfg.vae_epochs):
        task.epoch(adam, rng, 0.0)
    return vae, task


def make_prototypes(X_train, vae: VaeModel, M: int, seed: int) -> np.ndarray:
    """k-means centres of the VAE reconstructions of ``X_train``."""
    X_train = np.asarray(X_train, dtype=np.float64)
    if M > X_train.shape[0]:
        raise ConfigurationError(f"{M} prototypes requested from {X_train.shape[0]} training nodes")
    recon = vae.reconstruct(X_train)
    centers, _ = kmeans(recon, M, np.random.default_rng(seed))
    return centers


@dataclass(frozen=True, eq=False)
class PrototypePool:
    features: np.ndarray  # all prototypes, concatenated in client-id order
    owners: np.ndarray  # client id of each row

    def foreign(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows contributed by clients other than ``k`` and their pool indices."""
        idx = np.flatnonzero(self.owners != k)
        return self.features[idx], idx


def aggregate_and_broadcast(prototypes: list[np.ndarray], ledger: CommsLedger | None = None) -> PrototypePool:
    """Concatenate per-client prototypes and account for upload plus one broadcast.

    The upload costs Σ M_k·d scalars and the broadcast of the pooled matrix is
    counted once (a multicast), giving 2·Σ M_k·d in total.
    """
    if not prototypes:
        raise ConfigurationError("no client contributed prototypes")
    feats = np.vstack([np.asarray(p, dtype=np.float64) for p in prototypes])
    owners = np.concatenate([np.full(len(p), k) for k, p in enumerate(prototypes)])
    if ledger is not None:
        ledger.record(PROTO_PHASE, up=feats.size, down=feats.size)
        ledger.tick(PROTO_PHASE)
    return PrototypePool(feats, owners)


# ----------------------------------------------------------------------- VGAE


def train_vgae_federated(graphs: list[Graph], cfg: GenConfig, seed: int, workers: int = 1, ledger=None):
    """FedAvg-trained VGAE over client subgraphs; returns the global ParamVector."""
    d = graphs[0].d
    init = VgaeModel.init_params(d, np.random.default_rng([seed, 2, 10**6]), cfg.vgae_hidden, cfg.vgae_latent)
    tasks = [
        VgaeTask(VgaeModel(gcn_norm_adj(g.n, g.edges), init.copy()), g.features, g.edges, cfg.neg_ratio)
        for g in graphs
    ]
    res = run_federated_training(
        tasks,
        init,
        cfg.vgae_rounds,
        cfg.vgae_local_epochs,
        lr=cfg.vgae_lr,
        weighting=cfg.vgae_weighting,
        seed=seed,
        stream=2,
        workers=workers,
        ledger=ledger,
        phase=VGAE_PHASE,
    )
    return res.params


@dataclass(frozen=True, eq=False)
class AugmentedSubgraph:
    graph: Graph  # original nodes first (same local ids), then linked prototypes
    n_original: int
    proto_index: np.ndarray  # pool index of each appended prototype node
    new_edges: np.ndarray  # (prototype local id, original local id) pairs added

    @property
    def n_prototypes(self) -> int:
        return int(self.proto_index.size)


def top_pairs(probs: np.ndarray, count: int) -> np.ndarray:
    """Flat indices of the ``count`` largest entries of a (P, n) matrix.

    Ties are broken by prototype index, then node index.
    """
    P, n = probs.shape
    proto, node = np.divmod(np.arange(P * n), n)
    order = np.lexsort((node, proto, -probs.ravel()))
    return order[:count]


def predict_and_augment(
    g: Graph,
    X_hat: np.ndarray,
    vgae_params: ParamVector,
    p: float,
    pool_index=None,
) -> AugmentedSubgraph:
    """Link the top ⌈p·pairs⌉ (prototype, node) pairs scored by the global VGAE.

    Prototypes are encoded as isolated nodes of the extended graph. Only
    prototypes that receive at least one edge are appended, since an isolated
    prototype cannot influence any original node. ``p = 0`` returns ``g`` unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"edge fraction p must lie in [0, 1], got {p}")
    X_hat = np.asarray(X_hat, dtype=np.float64).reshape(-1, g.d)
    pool_index = np.arange(X_hat.shape[0]) if pool_index is None else np.asarray(pool_index)
    P, n = X_hat.shape[0], g.n
    empty = AugmentedSubgraph(g, n, np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64))
    if P == 0 or n == 0:
        log.info("no (prototype, node) pairs; subgraph unchanged")
        return empty
    count = math.ceil(p * P * n - 1e-9)
    if count == 0:
        return empty

    model = VgaeModel(gcn_norm_adj(n + P, g.edges), vgae_params.copy())
    mu, _, _ = model.encode(np.vstack([g.features, X_hat]))
    probs = sigmoid(mu[n:] @ mu[:n].T)  # (P, n)
    picked = top_pairs(probs, count)
    proto, node = np.divmod(picked, n)
    used = np.unique(proto)
    local = np.full(P, -1, dtype=np.int64)
    local[used] = n + np.arange(used.size)
    new_edges = np.column_stack([local[proto], node])
    feats = np.vstack([g.features, X_hat[used]])
    labels = np.concatenate([g.labels, np.zeros(used.size, dtype=np.int64)])  # placeholders, never used
    aug = Graph(feats, np.vstack([g.edges, new_edges]), labels, g.num_classes)
    return AugmentedSubgraph(aug, n, pool_index[used], new_edges)


# ------------------------------------------------------------------ pipeline


@dataclass
class GenerationResult:
    augmented: list[AugmentedSubgraph]
    pool: PrototypePool
    vgae_params: ParamVector
    ledger: CommsLedger
    vae_steps: list[int]


def generate_missing_neighbors(
    graphs: list[Graph],
    train_rows: list[np.ndarray],
    cfg: GenConfig,
    seed: int,
    workers: int = 1,
    ledger: CommsLedger | None = None,
) -> GenerationResult:
    """Run the full prototype / VGAE / augmentation sequence for all clients."""
    ledger = ledger if ledger is not None else CommsLedger()
    protos, steps = [], []
    for k, (g, rows) in enumerate(zip(graphs, train_rows)):
        rng = np.random.default_rng([seed, 1, k])
        vae, task = train_vae(g.features[rows], cfg, rng)
        protos.append(make_prototypes(g.features[rows], vae, cfg.protos_per_client, seed=seed * 1009 + k))
        steps.append(task.steps)
    pool = aggregate_and_broadcast(protos, ledger)
    params = train_vgae_federated(graphs, cfg, seed, workers, ledger=ledger)
    augmented = []
    for k, g in enumerate(graphs):
        feats, idx = pool.foreign(k)
        augmented.append(predict_and_augment(g, feats, params, cfg.edge_top_p, idx))
    return GenerationResult(augmented, pool, params, ledger, steps)
