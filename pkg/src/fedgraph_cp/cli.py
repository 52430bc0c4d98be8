"""Command line entry point: ``fedgraph-cp <command> ...``.

Commands
    run            run the configured pipelines and write CSVs (and optional PNGs)
    verify         run the property and acceptance test suites with pytest
    partition      partition a dataset and print or save the node -> client map
    synth          write the synthetic citation graph as a dataset directory
    convert-linqs  convert ``<name>.content`` / ``<name>.cites`` files to a dataset directory
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from .errors import FedGraphError
from .graph import EDGES_FILE, FEATURES_FILE, LABELS_FILE, load_graph, write_graph
from .harness import dump_config, emit_outputs, load_config, run_experiment
from .partition import missing_edge_report, partition_graph, write_partition
from .synthetic import citation_graph

log = logging.getLogger("fedgraph_cp.cli")


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(v.strip()) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def _add_run(sub):
    p = sub.add_parser("run", help="run loc/fed/gen pipelines and emit CSVs")
    p.add_argument("--config", type=Path, help="key = value config file (defaults used when omitted)")
    p.add_argument("--pipeline", choices=["loc", "fed", "gen"], action="append", help="repeatable; overrides config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-dir", dest="dataset", help="dataset directory, or 'synthetic'")
    p.add_argument("--clients", type=_csv_list(int), help="comma-separated client counts K")
    p.add_argument("--seed", dest="seeds", type=_csv_list(int), help="comma-separated seeds")
    p.add_argument("--alpha", dest="alphas", type=_csv_list(float), help="comma-separated miscoverage levels")
    p.add_argument("--score", dest="scores", type=_csv_list(str), help="aps, raps and/or lac")
    p.add_argument("--quantile", dest="qmethods", type=_csv_list(str), help="avg, tdigest and/or exact")
    p.add_argument("--model", choices=["gcn", "sage"])
    p.add_argument("--imbalance", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--randomized", action="store_true", default=None, help="randomized APS/RAPS scores")
    p.add_argument("--gen", action="store_true", help="shorthand for --pipeline loc --pipeline fed --pipeline gen")
    p.add_argument("--proto-per-client", dest="protos_per_client", type=int)
    p.add_argument("--edge-top-p", dest="edge_top_p", type=float)
    p.add_argument("--vgae-rounds", dest="vgae_rounds", type=int)
    p.add_argument("--dp-epsilon", dest="dp_epsilon", type=float, help="privacy budget for the VAE (inf = off)")
    p.add_argument("--dp-delta", dest="dp_delta", type=float)
    p.add_argument("--dp-clip", dest="dp_clip", type=float)
    p.add_argument("--workers", type=int, help="client threads per federated round")
    p.add_argument("--figures", action="store_true", default=None, help="also render PNG charts")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_run)


_OVERRIDES = (
    "dataset clients seeds alphas scores qmethods model imbalance rounds local_epochs batch_size randomized "
    "protos_per_client edge_top_p vgae_rounds dp_epsilon dp_delta dp_clip workers figures out"
).split()


def cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in _OVERRIDES}
    if args.gen:
        overrides["pipelines"] = ["loc", "fed", "gen"]
    if args.pipeline:
        overrides["pipelines"] = list(dict.fromkeys(args.pipeline))
    cfg = load_config(args.config, overrides)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return 0

    def progress(batch):
        r = batch[0]
        log.info("seed=%d K=%d %s done (%d rows, %.0f ms)", r.seed, r.K, r.pipeline, len(batch), r.wall_ms)

    records = run_experiment(cfg, progress=progress)
    written = emit_outputs(records, cfg.out, figures=cfg.figures)
    (Path(cfg.out) / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    for p in written:
        print(p)
    return 0


def cmd_verify(args) -> int:
    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        log.error("test directory %s not found; pass --tests", tests)
        return 2
    target = tests / "test_acceptance.py" if args.acceptance else tests
    cmd = [sys.executable, "-m", "pytest", str(target)]
    return subprocess.call(cmd + list(args.pytest_args))


def _pytest_args(argv: list[str]) -> list[str]:
    """Everything after ``verify`` except verify's own options, in the given order."""
    rest = argv[argv.index("verify") + 1 :]
    out, skip = [], False
    for tok in rest:
        if skip:
            skip = False
        elif tok == "--tests":
            skip = True
        elif tok != "--acceptance" and not tok.startswith("--tests="):
            out.append(tok)
    return out


def cmd_partition(args) -> int:
    g = citation_graph() if args.data_dir == "synthetic" else load_graph(args.data_dir)
    part = partition_graph(g, args.clients, seed=args.seed, imbalance=args.imbalance)
    cut, frac = missing_edge_report(part)
    sizes = np.bincount(part.assignment, minlength=args.clients)
    print(f"# n={g.n} edges={g.num_edges} K={args.clients} cut={cut} delta_e_pct={100 * frac:.3f}", file=sys.stderr)
    print(f"# client sizes: {' '.join(map(str, sizes))}", file=sys.stderr)
    if args.out:
        write_partition(part, args.out)
    else:
        for v, k in enumerate(part.assignment):
            print(f"{v}\t{k}")
    return 0


def cmd_synth(args) -> int:
    g = citation_graph(seed=args.seed)
    write_graph(g, args.out)
    print(f"wrote {args.out}: n={g.n} edges={g.num_edges} d={g.d} classes={g.num_classes}")
    return 0


def convert_linqs(content, cites, out) -> tuple[int, int, int]:
    """LINQS ``.content`` / ``.cites`` pair -> dataset directory.

    Paper ids are renumbered in file order and class names in sorted order.
    Citations naming unknown papers and self-citations are dropped.
    Returns (nodes, edges kept, edges dropped).
    """
    ids, feats, names = {}, [], []
    with open(content, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise FedGraphError(f"{content}:{lineno}: expected 'id features... label'")
            if parts[0] in ids:
                raise FedGraphError(f"{content}:{lineno}: duplicate paper id {parts[0]}")
            ids[parts[0]] = len(ids)
            feats.append(np.array(parts[1:-1], dtype=np.float64))
            names.append(parts[-1])
    classes = {c: i for i, c in enumerate(sorted(set(names)))}
    edges, dropped = set(), 0
    with open(cites, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = ids.get(parts[0]), ids.get(parts[1])
            if a is None or b is None or a == b:
                dropped += 1
                continue
            edges.add((min(a, b), max(a, b)))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    X = np.vstack(feats)
    n = X.shape[0]
    np.savetxt(out / FEATURES_FILE, np.column_stack([np.arange(n), X]), fmt=["%d"] + ["%.17g"] * X.shape[1], delimiter="\t")
    np.savetxt(out / EDGES_FILE, np.array(sorted(edges), dtype=np.int64).reshape(-1, 2), fmt="%d", delimiter=" ")
    labels = np.array([classes[c] for c in names])
    np.savetxt(out / LABELS_FILE, np.column_stack([np.arange(n), labels]), fmt="%d", delimiter="\t")
    return n, len(edges), dropped


def cmd_convert(args) -> int:
    src = Path(args.src)
    content, cites = src / f"{args.name}.content", src / f"{args.name}.cites"
    n, m, dropped = convert_linqs(content, cites, args.out)
    print(f"wrote {args.out}: n={n} edges={m} dropped citations={dropped}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedgraph-cp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    _add_run(sub)

    p = sub.add_parser("verify", help="run the test suites with pytest")
    p.add_argument("--tests", help="tests directory (default: the source checkout's tests/)")
    p.add_argument("--acceptance", action="store_true", help="acceptance criteria only")
    p.add_argument("pytest_args", nargs="*", help="extra arguments passed to pytest (options too)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("partition", help="partition a dataset into K clients")
    p.add_argument("data_dir", help="dataset directory, or 'synthetic'")
    p.add_argument("--clients", "-K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--imbalance", type=float, default=0.05)
    p.add_argument("--out", help="write 'node<TAB>client' lines here instead of stdout")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("synth", help="write the synthetic citation graph")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-linqs", help="convert LINQS citation files (e.g. cora.content / cora.cites)")
    p.add_argument("src", help="directory holding the two files")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--name", default="cora", help="file stem (default: cora)")
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "verify":
        args.pytest_args = _pytest_args(argv)
    elif extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        log.setLevel(min(level, logging.INFO))
    try:
        return args.func(args)
    except FedGraphError as exc:
        log.error("%s", exc)
        return 1
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
