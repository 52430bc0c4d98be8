from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).resolve().parent


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    flat = x.reshape(-1)
    g = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return g.reshape(x.shape)


def rel_error(analytic, numeric, floor: float = 1e-7) -> float:
    """Max elementwise |a - n| / max(|a| + |n|, floor)."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor), initial=0.0))


def cora_dir() -> Path | None:
    """A dataset directory holding Cora, if one is available locally."""
    env = os.environ.get("FEDGRAPH_CORA_DIR")
    for cand in ([Path(env)] if env else []) + [HERE / "data" / "cora"]:
        if (cand / "features.tsv").exists() or (cand / "cora.content").exists():
            return cand
    return None


def load_cora(tmp_path_factory):
    from fedgraph_cp.cli import convert_linqs
    from fedgraph_cp.graph import load_graph

    src = cora_dir()
    if src is None:
        pytest.skip("Cora not available (set FEDGRAPH_CORA_DIR or add tests/data/cora)")
    if not (src / "features.tsv").exists():
        out = tmp_path_factory.mktemp("cora")
        convert_linqs(src / "cora.content", src / "cora.cites", out)
        src = out
    return load_graph(src)


@pytest.fixture(scope="session")
def synthetic_graph():
    from fedgraph_cp.synthetic import citation_graph

    return citation_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# verdict lines from test_acceptance.py, echoed after the run
ACCEPTANCE: list[str] = []


def verdict(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
