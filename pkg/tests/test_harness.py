from __future__ import annotations

import dataclasses
import math

import pytest

from fedgraph_cp.errors import ConfigurationError, ReportError, StageError
from fedgraph_cp.harness import (
    ExperimentConfig,
    RunRecord,
    accuracy_report,
    dump_config,
    emit_outputs,
    load_config,
    prepare,
    run_experiment,
    run_pipeline,
    run_prepared,
)
from fedgraph_cp.harness.config import parse_config_text
from fedgraph_cp.harness.report import FIGURES, SUMMARY_FILE, render_outputs
from fedgraph_cp.synthetic import citation_graph

SCHEMA = (
    "dataset,seed,K,pipeline,model,score,alpha,qmethod,coverage,inefficiency,"
    "accuracy,qhat,delta_e_pct,scalars_comm,wall_ms"
)


@pytest.fixture(scope="module")
def small_graph():
    return citation_graph(n=300, num_edges=700, d=120, seed=0)


def quick(**kw) -> ExperimentConfig:
    base = dict(
        clients=[2],
        alphas=[0.1],
        seeds=[0],
        hidden=16,
        rounds=5,
        protos_per_client=2,
        vae_epochs=2,
        vae_latent=4,
        vgae_rounds=2,
        dataset_name="tiny",
    )
    base.update(kw)
    return ExperimentConfig(**base).validate()


def metrics_of(r: RunRecord):
    return (r.coverage, r.inefficiency, r.accuracy, r.qhat)


# --------------------------------------------------------------------- config


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(
        "# demo\n"
        "dataset = data/cora\n"
        "clients = 3, 5   # trailing comment\n"
        "alphas = 0.05\n"
        "randomized = yes\n"
        "local-epochs = 2\n"
    )
    cfg = load_config(p, {"seeds": [7], "rounds": None})
    assert cfg.dataset == "data/cora" and cfg.name == "cora"
    assert cfg.clients == [3, 5] and cfg.alphas == [0.05]
    assert cfg.randomized is True and cfg.local_epochs == 2
    assert cfg.seeds == [7] and cfg.rounds == 100


def test_config_round_trip(tmp_path):
    cfg = quick(scores=["aps", "lac"], dp_epsilon=3.0)
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "clients =",
        "alphas = 1.5",
        "scores = foo",
        "qmethods = median",
        "pipelines = loc, cloud",
        "model = gat",
        "train_frac = 0.5",
        "rounds = -1",
        "batch_size = 0",
        "edge_top_p = 2",
        "dp_epsilon = 0",
        "workers = 0",
        "bogus = 1",
        "rounds = ten",
        "randomized = maybe",
        "no equals sign",
    ],
)
def test_config_rejects_bad_values(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_unknown_override_rejected():
    with pytest.raises(ConfigurationError):
        load_config(None, {"colour": "red"})


def test_parse_config_reports_line():
    with pytest.raises(ConfigurationError, match=":2:"):
        parse_config_text("rounds = 3\noops\n", "x.cfg")


# ------------------------------------------------------------------ pipelines


def test_record_columns_follow_schema():
    assert ",".join(RunRecord.columns()) == SCHEMA


def test_fed_with_one_client_equals_loc(small_graph):
    cfg = quick(clients=[1], qmethods=["exact", "avg"])
    prep = prepare(small_graph, 1, 0, cfg)
    [loc] = run_prepared(prep, "loc", cfg)
    fed = run_prepared(prep, "fed", cfg)
    for r in fed:
        assert metrics_of(r) == metrics_of(loc)
    assert loc.scalars_comm == 0 and fed[0].scalars_comm > 0


def test_gen_without_edges_equals_fed(small_graph):
    cfg = quick(edge_top_p=0.0)
    prep = prepare(small_graph, 2, 0, cfg)
    fed = run_prepared(prep, "fed", cfg)
    gen = run_prepared(prep, "gen", cfg)
    assert [metrics_of(r) for r in fed] == [metrics_of(r) for r in gen]
    assert gen[0].scalars_comm > fed[0].scalars_comm


def test_records_reproducible(small_graph):
    cfg = quick(clients=[2, 3], pipelines=["loc", "fed", "gen"], scores=["aps", "raps"], randomized=True)

    def strip(recs):
        return [dataclasses.replace(r, wall_ms=0.0) for r in recs]

    a = run_experiment(cfg, small_graph)
    b = run_experiment(cfg, small_graph)
    assert strip(a) == strip(b)
    assert len(a) == 2 * 3 * 2
    for r in a:
        assert 0.0 <= r.coverage <= 1.0
        assert 0.0 <= r.inefficiency <= small_graph.num_classes
        assert r.delta_e_pct >= 0.0


def test_worker_count_does_not_change_records(small_graph):
    cfg = quick(clients=[3], pipelines=["fed", "gen"])
    a = run_experiment(cfg, small_graph)
    b = run_experiment(dataclasses.replace(cfg, workers=3), small_graph)
    assert [metrics_of(r) for r in a] == [metrics_of(r) for r in b]


def test_run_pipeline_matches_run_experiment(small_graph):
    cfg = quick(clients=[2], pipelines=["fed"])
    a = run_pipeline(cfg, "fed", small_graph)
    b = run_experiment(cfg, small_graph)
    assert [metrics_of(r) for r in a] == [metrics_of(r) for r in b]


def test_prototypes_never_enter_roles(small_graph):
    cfg = quick(clients=[2], edge_top_p=0.2)
    prep = prepare(small_graph, 2, 0, cfg)
    for c in prep.clients:
        for rows in (c.roles.train, c.roles.valid, c.roles.calib, c.roles.test):
            assert rows.size == 0 or rows.max() < c.graph.n


def test_stage_tagged_failure(small_graph):
    cfg = quick(clients=[400])
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, "fed", small_graph)
    assert info.value.stage == "partition"
    cfg = quick(dataset="/nonexistent/dir")
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, "fed")
    assert info.value.stage == "load"


# -------------------------------------------------------------------- reports


def fake_record(**kw) -> RunRecord:
    base = dict(
        dataset="d",
        seed=0,
        K=3,
        pipeline="fed",
        model="gcn",
        score="aps",
        alpha=0.1,
        qmethod="avg",
        coverage=0.9,
        inefficiency=2.0,
        accuracy=0.8,
        qhat=0.7,
        delta_e_pct=5.0,
        scalars_comm=100,
        wall_ms=1.5,
    )
    base.update(kw)
    return RunRecord(**base)


def test_emit_empty_writes_nothing(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(ReportError):
        emit_outputs([], out)
    assert not out.exists()


def test_emit_two_records(tmp_path):
    recs = [fake_record(), fake_record(seed=1, coverage=0.95)]
    paths = emit_outputs(recs, tmp_path)
    summary = (tmp_path / SUMMARY_FILE).read_text().splitlines()
    assert summary[0] == SCHEMA
    assert len(summary) == 3
    names = {p.name for p in paths}
    assert {f"{s}.csv" for s in FIGURES} <= names
    assert "accuracy_change.csv" not in names


def test_emit_byte_identical(tmp_path):
    recs = [fake_record(), fake_record(pipeline="gen", accuracy=0.84), fake_record(K=5, qhat=math.inf)]
    a = {p.name: p.read_bytes() for p in emit_outputs(recs, tmp_path / "a")}
    b = {p.name: p.read_bytes() for p in emit_outputs(recs, tmp_path / "b")}
    assert a == b
    assert "accuracy_change.csv" in a


def test_emit_figures(tmp_path):
    recs = [fake_record(K=k, seed=s, coverage=0.9 + 0.01 * s) for k in (3, 5) for s in range(2)]
    paths = emit_outputs(recs, tmp_path, figures=True)
    pngs = [p for p in paths if p.suffix == ".png"]
    assert pngs and all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_plot_data_aggregates_over_seeds():
    recs = [fake_record(seed=s, inefficiency=v) for s, v in enumerate((1.0, 2.0, 3.0))]
    text = render_outputs(recs)["set_size_by_clients.csv"].splitlines()
    assert len(text) == 2
    row = text[1].split(",")
    assert row[-3:] == ["2.0", "1.0", "3"]


def test_accuracy_report():
    recs = [fake_record(seed=s) for s in range(2)] + [fake_record(seed=s, pipeline="gen") for s in range(2)]
    [row] = accuracy_report(recs)
    assert row["delta_acc_pct"] == 0.0
    recs[-1] = fake_record(seed=1, pipeline="gen", accuracy=0.88)
    assert accuracy_report(recs)[0]["delta_acc_pct"] == pytest.approx((0.84 - 0.8) / 0.8 * 100)
    with pytest.raises(ReportError):
        accuracy_report(recs[:-1])


def test_accuracy_report_skips_single_pipeline_groups():
    recs = [fake_record(), fake_record(pipeline="gen"), fake_record(K=5)]
    assert [r["K"] for r in accuracy_report(recs)] == [3]


@pytest.mark.slow
def test_generation_restores_accuracy_on_planted_communities(synthetic_graph):
    # Communities carry the classes and the partition cuts them; prototype
    # neighbours stand in for the lost links, so gen beats fed on average.
    cfg = ExperimentConfig(clients=[10], alphas=[0.05], seeds=[0, 1, 2], pipelines=["fed", "gen"]).validate()
    [row] = accuracy_report(run_experiment(cfg, synthetic_graph))
    print(f"K=10 fed {row['acc_fed']:.4f} gen {row['acc_gen']:.4f} delta {row['delta_acc_pct']:+.2f}%")
    assert row["delta_acc_pct"] > 0.0
