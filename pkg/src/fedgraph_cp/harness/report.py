"""CSV emission: run summary, per-figure long-format data and optional PNGs.

Every file is rendered in memory first and written only after all of them
rendered, so a failure never leaves a partial set of outputs behind.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..errors import ReportError
from .pipelines import RunRecord, accuracy_report

log = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"
PLOT_COLUMNS = ["dataset", "pipeline", "model", "score", "qmethod", "K", "alpha", "metric", "mean", "std", "runs"]
ACCURACY_COLUMNS = ["dataset", "model", "K", "acc_fed", "acc_gen", "delta_acc_pct", "seeds"]

# file stem -> (description, metric, record filter)
FIGURES = {
    "missing_edges": ("missing cross-client edges (%) by K", "delta_e_pct", None),
    "set_size_by_clients": ("prediction-set size by K", "inefficiency", None),
    "coverage_by_clients": ("coverage by K, fed and gen", "coverage", lambda r: r.pipeline in ("fed", "gen")),
    "coverage_by_score": ("fed coverage by score family", "coverage", lambda r: r.pipeline == "fed"),
    "set_size_by_quantile_method": ("fed set size by quantile method", "inefficiency", lambda r: r.pipeline == "fed"),
}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def summary_csv(records: list[RunRecord]) -> str:
    return _csv(RunRecord.columns(), [r.as_row() for r in records])


def aggregate(records: list[RunRecord], metric: str, keep=None) -> list[dict]:
    """Mean/std of ``metric`` over seeds, long format, sorted by key."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    seen = set()
    for r in records:
        if keep is not None and not keep(r):
            continue
        if metric == "delta_e_pct":
            key = (r.dataset, "-", "-", "-", "-", r.K, "-")
            if (key, r.seed) in seen:
                continue  # one partition per (seed, K), repeated across rows
            seen.add((key, r.seed))
        else:
            key = (r.dataset, r.pipeline, r.model, r.score, r.qmethod, r.K, r.alpha)
        groups[key].append(float(getattr(r, metric)))
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) if isinstance(x, str) else f"{x:020.6f}" for x in k)):
        vals = np.array(groups[key])
        rows.append(
            dict(
                zip(PLOT_COLUMNS[:7], key),
                metric=metric,
                mean=float(vals.mean()),
                std=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                runs=int(vals.size),
            )
        )
    return rows


def render_outputs(records: list[RunRecord]) -> dict[str, str]:
    if not records:
        raise ReportError("no run records to emit")
    files = {SUMMARY_FILE: summary_csv(records)}
    for stem, (_, metric, keep) in FIGURES.items():
        files[f"{stem}.csv"] = _csv(PLOT_COLUMNS, aggregate(records, metric, keep))
    pipelines = {r.pipeline for r in records}
    if {"fed", "gen"} <= pipelines:
        files["accuracy_change.csv"] = _csv(ACCURACY_COLUMNS, accuracy_report(records))
    return files


def emit_outputs(records: list[RunRecord], out_dir, figures: bool = False) -> list[Path]:
    """Write summary and plot-data CSVs (and PNGs when ``figures``); returns written paths."""
    files = render_outputs(records)
    pngs = render_figures(files) if figures else {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    for name, data in pngs.items():
        p = out / name
        p.write_bytes(data)
        written.append(p)
    return written


def _read_long(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def render_figures(files: dict[str, str]) -> dict[str, bytes]:
    """One line chart per plot-data file: metric mean (± std) against K."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    for stem, (title, metric, _) in FIGURES.items():
        rows = _read_long(files[f"{stem}.csv"])
        if not rows:
            continue
        series = defaultdict(list)
        for r in rows:
            label = " ".join(v for v in (r["pipeline"], r["score"], r["qmethod"]) if v != "-")
            if r["alpha"] != "-":
                label += f" α={float(r['alpha']):g}"
            series[label or metric].append((int(r["K"]), float(r["mean"]), float(r["std"])))
        fig, ax = plt.subplots(figsize=(6, 4))
        for label in sorted(series):
            pts = sorted(series[label])
            ks, mean, std = (np.array(v) for v in zip(*pts))
            ax.errorbar(ks, mean, yerr=std, marker="o", capsize=3, label=label)
        ax.set_xlabel("clients K")
        ax.set_ylabel(metric)
        ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
        plt.close(fig)
        out[f"{stem}.png"] = buf.getvalue()
    return out
