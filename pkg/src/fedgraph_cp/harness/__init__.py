"""Experiment harness: configuration, pipelines and output emission."""

from .config import ExperimentConfig, dump_config, load_config
from .pipelines import RunRecord, accuracy_report, prepare, run_experiment, run_pipeline, run_prepared
from .report import emit_outputs, render_outputs

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "accuracy_report",
    "dump_config",
    "emit_outputs",
    "load_config",
    "prepare",
    "render_outputs",
    "run_experiment",
    "run_pipeline",
    "run_prepared",
]
