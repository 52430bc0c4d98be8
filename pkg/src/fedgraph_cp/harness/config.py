"""Experiment configuration: a flat ``key = value`` text file plus overrides.

Lines starting with ``#`` are comments. List-valued keys take comma-separated
values, booleans accept true/false/yes/no/1/0. Example::

    dataset   = data/cora
    clients   = 3, 5
    alphas    = 0.05
    pipelines = loc, fed, gen
    seeds     = 0, 1, 2, 3, 4
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..conformal.quantile import METHODS
from ..errors import ConfigurationError
from ..generator import GenConfig

PIPELINES = ("loc", "fed", "gen")
SCORES = ("aps", "raps", "lac")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    dataset_name: str = ""
    clients: list[int] = field(default_factory=lambda: [3, 5, 10, 20])
    alphas: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2])
    scores: list[str] = field(default_factory=lambda: ["aps"])
    qmethods: list[str] = field(default_factory=lambda: ["avg"])
    pipelines: list[str] = field(default_factory=lambda: ["loc", "fed", "gen"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    model: str = "gcn"
    hidden: int = 64
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    weight_decay: float = 5e-4
    imbalance: float = 0.05
    train_frac: float = 0.2
    calib_frac: float = 0.4
    test_frac: float = 0.4
    valid_within_train: float = 0.2
    randomized: bool = False
    raps_nu: float = 0.01
    raps_k: int = 1
    tdigest_compression: float = 100.0
    synthetic_seed: int = 0
    # generator
    protos_per_client: int = 5
    edge_top_p: float = 0.04
    vae_epochs: int = 100
    vae_batch: int = 32
    vae_latent: int = 32
    rho: float = 0.1
    beta: float = 0.1
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    vgae_rounds: int = 50
    # differential privacy on the generator's VAE (off unless dp_epsilon is set)
    dp_epsilon: float = math.inf
    dp_delta: float = 1e-5
    dp_clip: float = 1.0
    workers: int = 1
    out: str = "results"
    figures: bool = False

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.calib_frac, self.test_frac)

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        return "synthetic" if self.dataset == "synthetic" else Path(self.dataset).name

    def gen_config(self) -> GenConfig:
        return GenConfig(
            protos_per_client=self.protos_per_client,
            edge_top_p=self.edge_top_p,
            vae_latent=self.vae_latent,
            vae_epochs=self.vae_epochs,
            vae_batch=self.vae_batch,
            rho=self.rho,
            beta=self.beta,
            lambda_rec=self.lambda_rec,
            lambda_kl=self.lambda_kl,
            vgae_rounds=self.vgae_rounds,
            dp_epsilon=self.dp_epsilon,
            dp_delta=self.dp_delta,
            dp_clip=self.dp_clip,
        )

    def validate(self) -> ExperimentConfig:
        for key in ("clients", "alphas", "scores", "qmethods", "pipelines", "seeds"):
            if not getattr(self, key):
                raise ConfigurationError(f"{key} must not be empty")
        if any(k < 1 for k in self.clients):
            raise ConfigurationError("client counts must be >= 1")
        if any(not 0 < a < 1 for a in self.alphas):
            raise ConfigurationError("alphas must lie in (0, 1)")
        _check_choices("scores", self.scores, SCORES)
        _check_choices("qmethods", self.qmethods, METHODS)
        _check_choices("pipelines", self.pipelines, PIPELINES)
        _check_choices("model", [self.model], ("gcn", "sage"))
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError("train/calib/test fractions must sum to 1")
        if self.rounds < 0 or self.local_epochs < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds >= 0 required; local_epochs, hidden and batch_size must be >= 1")
        if not 0 <= self.edge_top_p <= 1:
            raise ConfigurationError("edge_top_p must lie in [0, 1]")
        if self.protos_per_client < 1:
            raise ConfigurationError("protos_per_client must be >= 1")
        if self.dp_epsilon <= 0 or self.dp_clip <= 0:
            raise ConfigurationError("dp_epsilon and dp_clip must be positive")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        return self


def _check_choices(key, values, allowed):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigurationError(f"{key}: unknown value(s) {bad}; expected {list(allowed)}")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    raw = raw.strip()
    try:
        if isinstance(default, list):
            item = type(default[0]) if default else str
            return [item(v.strip()) for v in raw.split(",") if v.strip()]
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then non-None ``overrides``; validated."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = val
    return ExperimentConfig(**values).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
