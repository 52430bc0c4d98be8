"""The Loc / Fed / Gen experiment pipelines.

For one (dataset, seed, K) the graph is partitioned once and every client's
nodes are split into train/valid/calib/test. Then:

* ``loc``  each client trains alone and calibrates with its own scores
           (classical split CP); metrics are averaged over clients;
* ``fed``  clients train one GCN/SAGE with FedAvg, average their fitted
           temperatures and calibrate with a federated quantile; metrics are
           pooled over all test nodes;
* ``gen``  clients first add generated neighbours, then run ``fed``.

Random streams are keyed by (seed, purpose, client) so the classifier sees the
same initialisation and data order in ``fed`` and ``gen``.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp

from ..conformal import ScoreSet, Scorer, federated_quantile
from ..errors import FedGraphError, ReportError, StageError
from ..federation import ClassifierTask, CommsLedger, run_federated_training
from ..generator import generate_missing_neighbors
from ..graph import Graph, RoleMask, load_graph, split_roles
from ..models import make_classifier, temperature_fit
from ..nn import ParamVector, softmax
from ..partition import Partition, missing_edge_report, partition_graph
from ..synthetic import citation_graph
from .config import ExperimentConfig

log = logging.getLogger(__name__)

_S_INIT, _S_TRAIN, _S_ROLES, _S_SCORE = 10, 0, 3, 4


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as a StageError tagged ``name``."""
    try:
        yield
    except StageError:
        raise
    except (FedGraphError, ValueError, ArithmeticError, OSError, AssertionError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class RunRecord:
    dataset: str
    seed: int
    K: int
    pipeline: str
    model: str
    score: str
    alpha: float
    qmethod: str
    coverage: float
    inefficiency: float
    accuracy: float
    qhat: float
    delta_e_pct: float
    scalars_comm: int
    wall_ms: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ preparation


@dataclass
class ClientData:
    graph: Graph
    global_ids: np.ndarray
    roles: RoleMask


@dataclass
class Prepared:
    dataset: str
    seed: int
    K: int
    partition: Partition
    clients: list[ClientData]
    delta_e_pct: float


def load_dataset(cfg: ExperimentConfig) -> Graph:
    with stage("load"):
        if cfg.dataset == "synthetic":
            return citation_graph(seed=cfg.synthetic_seed)
        return load_graph(cfg.dataset)


def prepare(g: Graph, K: int, seed: int, cfg: ExperimentConfig) -> Prepared:
    with stage("partition"):
        part = partition_graph(g, K, seed=seed, imbalance=cfg.imbalance)
        _, frac = missing_edge_report(part)
    with stage("split"):
        clients = []
        for k, cg in enumerate(part.clients):
            roles = split_roles(cg.graph, cfg.fractions, cfg.valid_within_train, seed=_role_seed(seed, k))
            clients.append(ClientData(cg.graph, cg.global_ids, roles))
    return Prepared(cfg.name, seed, K, part, clients, 100.0 * frac)


def _role_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, _S_ROLES, k]).generate_state(1)[0])


def _feature_operator(X: np.ndarray):
    # sparse bag-of-words features make X @ W much cheaper as CSR
    return sp.csr_matrix(X) if np.count_nonzero(X) < 0.2 * X.size else X


# --------------------------------------------------------------------- training


@dataclass
class ClientOutputs:
    logits: np.ndarray  # original (non-prototype) nodes only
    labels: np.ndarray
    roles: RoleMask
    temperature: float


def _tasks(graphs: list[Graph], roles: list[RoleMask], cfg: ExperimentConfig, init_seed_for):
    tasks = []
    for k, (g, r) in enumerate(zip(graphs, roles)):
        rng = np.random.default_rng([init_seed_for(k), _S_INIT])
        model = make_classifier(cfg.model, g.n, g.edges, g.d, cfg.hidden, g.num_classes, rng)
        tasks.append(ClassifierTask(model, _feature_operator(g.features), g.labels, r.train, cfg.batch_size))
    return tasks


def _outputs(task: ClassifierTask, roles: RoleMask, n_orig: int) -> ClientOutputs:
    logits, _ = task.model.forward(task.X)
    logits = logits[:n_orig]
    labels = np.asarray(task.labels[:n_orig])
    valid = roles.valid
    T = temperature_fit(logits[valid], labels[valid])
    return ClientOutputs(logits, labels, roles, T)


def train_local(prep: Prepared, cfg: ExperimentConfig) -> list[ClientOutputs]:
    graphs = [c.graph for c in prep.clients]
    roles = [c.roles for c in prep.clients]
    # client k's model starts from the same draw a K=1 federation would use
    tasks = _tasks(graphs, roles, cfg, lambda k: prep.seed + k * 7_919)
    outs = []
    for k, task in enumerate(tasks):
        with stage(f"train-local[{k}]"):
            run_federated_training(
                [task],
                task.params.copy(),
                cfg.rounds,
                cfg.local_epochs,
                lr=cfg.lr,
                weight_decay=cfg.weight_decay,
                seed=prep.seed + k * 7_919,
                stream=_S_TRAIN,
            )
            outs.append(_outputs(task, roles[k], graphs[k].n))
    return outs


def train_federated(prep: Prepared, cfg: ExperimentConfig, graphs=None, ledger=None):
    graphs = graphs or [c.graph for c in prep.clients]
    roles = [c.roles for c in prep.clients]
    tasks = _tasks(graphs, roles, cfg, lambda k: prep.seed)
    init: ParamVector = tasks[0].params.copy()
    with stage("train-fed"):
        res = run_federated_training(
            tasks,
            init,
            cfg.rounds,
            cfg.local_epochs,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            seed=prep.seed,
            stream=_S_TRAIN,
            workers=cfg.workers,
            ledger=ledger,
        )
    with stage("temperature"):
        outs = [_outputs(t, c.roles, c.graph.n) for t, c in zip(tasks, prep.clients)]
    return outs, res.ledger


# ------------------------------------------------------------------- conformal


def _scorer(cfg: ExperimentConfig, name: str) -> Scorer:
    return Scorer(name, cfg.randomized, cfg.raps_nu, cfg.raps_k)


def _u(scorer: Scorer, seed: int, k: int, n: int):
    if not scorer.uses_u:
        return None
    return np.random.default_rng([seed, _S_SCORE, k]).random(n)


def cp_local(outs: list[ClientOutputs], scorer: Scorer, alpha: float, seed: int):
    """Per-client split CP; returns client-averaged (coverage, size, accuracy, q̂)."""
    cov, size, acc, qs = [], [], [], []
    for k, o in enumerate(outs):
        probs = softmax(o.logits / o.temperature)
        u = _u(scorer, seed, k, probs.shape[0])
        S = scorer.matrix(probs, u)
        cal, test = o.roles.calib, o.roles.test
        q = local_quantile_or_inf(S[cal, o.labels[cal]], alpha)
        members = np.ones_like(S[test], dtype=bool) if np.isinf(q) else S[test] <= q
        cov.append(float(members[np.arange(test.size), o.labels[test]].mean()))
        size.append(float(members.sum(axis=1).mean()))
        acc.append(float(np.mean(np.argmax(o.logits[test], axis=1) == o.labels[test])))
        qs.append(q)
    return float(np.mean(cov)), float(np.mean(size)), float(np.mean(acc)), float(np.mean(qs))


def local_quantile_or_inf(scores, alpha: float) -> float:
    """Classical split-CP threshold for one client, +inf when the rank exceeds n."""
    return federated_quantile(ScoreSet(np.zeros(len(scores), dtype=np.int64), scores), alpha, "exact")


def cp_federated(outs: list[ClientOutputs], scorer: Scorer, alpha: float, qmethod: str, seed: int, compression=100.0):
    """Federated CP with averaged temperature; metrics pooled over all test nodes."""
    T = float(np.mean([o.temperature for o in outs]))
    clients, cal_scores, members, test_labels, correct = [], [], [], [], []
    matrices = []
    for k, o in enumerate(outs):
        probs = softmax(o.logits / T)
        S = scorer.matrix(probs, _u(scorer, seed, k, probs.shape[0]))
        matrices.append(S)
        cal = o.roles.calib
        cal_scores.append(S[cal, o.labels[cal]])
        clients.append(np.full(cal.size, k))
    scores = ScoreSet(np.concatenate(clients), np.concatenate(cal_scores))
    q = federated_quantile(scores, alpha, qmethod, compression)
    for o, S in zip(outs, matrices):
        test = o.roles.test
        members.append(np.ones_like(S[test], dtype=bool) if np.isinf(q) else S[test] <= q)
        test_labels.append(o.labels[test])
        correct.append(np.argmax(o.logits[test], axis=1) == o.labels[test])
    M = np.vstack(members)
    y = np.concatenate(test_labels)
    cov = float(M[np.arange(y.size), y].mean())
    return cov, float(M.sum(axis=1).mean()), float(np.concatenate(correct).mean()), q


# ---------------------------------------------------------------------- drivers


def _records(prep, pipeline, cfg, outs, comm, t0, federated: bool) -> list[RunRecord]:
    recs = []
    for score in cfg.scores:
        scorer = _scorer(cfg, score)
        for alpha in cfg.alphas:
            methods = cfg.qmethods if federated else ["local"]
            for qm in methods:
                with stage(f"conformal[{pipeline}]"):
                    if federated:
                        cov, size, acc, q = cp_federated(outs, scorer, alpha, qm, prep.seed, cfg.tdigest_compression)
                    else:
                        cov, size, acc, q = cp_local(outs, scorer, alpha, prep.seed)
                recs.append(
                    RunRecord(
                        prep.dataset,
                        prep.seed,
                        prep.K,
                        pipeline,
                        cfg.model,
                        score,
                        float(alpha),
                        qm,
                        cov,
                        size,
                        acc,
                        float(q),
                        prep.delta_e_pct,
                        int(comm),
                        round((time.perf_counter() - t0) * 1000.0, 3),
                    )
                )
    return recs


def run_prepared(prep: Prepared, pipeline: str, cfg: ExperimentConfig) -> list[RunRecord]:
    t0 = time.perf_counter()
    if pipeline == "loc":
        outs = train_local(prep, cfg)
        return _records(prep, pipeline, cfg, outs, 0, t0, federated=False)
    if pipeline == "fed":
        outs, ledger = train_federated(prep, cfg)
        return _records(prep, pipeline, cfg, outs, ledger.total(), t0, federated=True)
    if pipeline == "gen":
        ledger = CommsLedger()
        with stage("generate"):
            gen = generate_missing_neighbors(
                [c.graph for c in prep.clients],
                [c.roles.train for c in prep.clients],
                cfg.gen_config(),
                prep.seed,
                cfg.workers,
                ledger,
            )
        graphs = [a.graph for a in gen.augmented]
        outs, ledger = train_federated(prep, cfg, graphs=graphs, ledger=ledger)
        return _records(prep, pipeline, cfg, outs, ledger.total(), t0, federated=True)
    raise StageError("dispatch", ValueError(f"unknown pipeline {pipeline!r}"))


def run_pipeline(cfg: ExperimentConfig, pipeline: str, graph: Graph | None = None) -> list[RunRecord]:
    cfg.validate()
    g = graph if graph is not None else load_dataset(cfg)
    recs = []
    for seed in cfg.seeds:
        for K in cfg.clients:
            recs += run_prepared(prepare(g, K, seed, cfg), pipeline, cfg)
    return recs


def run_experiment(cfg: ExperimentConfig, graph: Graph | None = None, progress=None) -> list[RunRecord]:
    """All configured pipelines over all (seed, K); partitions are shared across pipelines."""
    cfg.validate()
    g = graph if graph is not None else load_dataset(cfg)
    recs = []
    for seed in cfg.seeds:
        for K in cfg.clients:
            prep = prepare(g, K, seed, cfg)
            for pipeline in cfg.pipelines:
                batch = run_prepared(prep, pipeline, cfg)
                if progress:
                    progress(batch)
                recs += batch
    return recs


# ------------------------------------------------------------------- reporting


def accuracy_report(records: list[RunRecord]) -> list[dict]:
    """Percentage change of gen over fed test accuracy per (dataset, model, K).

    Groups where only one of the two pipelines ran are skipped; groups where
    both ran on different seed sets raise ReportError.
    """
    acc: dict[tuple, dict[str, dict[int, float]]] = {}
    for r in records:
        if r.pipeline in ("fed", "gen"):
            acc.setdefault((r.dataset, r.model, r.K), {}).setdefault(r.pipeline, {})[r.seed] = r.accuracy
    rows = []
    for (dataset, model, K), by in sorted(acc.items()):
        fed, gen = by.get("fed", {}), by.get("gen", {})
        if not fed or not gen:
            continue  # only one of the pipelines ran for this K
        if set(fed) != set(gen):
            raise ReportError(f"{dataset} K={K}: fed seeds {sorted(fed)} != gen seeds {sorted(gen)}")
        a_fed = float(np.mean([fed[s] for s in sorted(fed)]))
        a_gen = float(np.mean([gen[s] for s in sorted(gen)]))
        rows.append(
            {
                "dataset": dataset,
                "model": model,
                "K": K,
                "acc_fed": a_fed,
                "acc_gen": a_gen,
                "delta_acc_pct": (a_gen - a_fed) / a_fed * 100.0,
                "seeds": len(fed),
            }
        )
    return rows
