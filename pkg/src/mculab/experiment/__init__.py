"""Experiment orchestration: configs, checkpoints, the stage pipeline, reports and the CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import SETTINGS, ExperimentConfig, load_config, parse_config
from .pipeline import RunManifest, reevaluate, run_setting, train_base
from .report import emit_report
from .plotting import emit_plot
