"""Configuration, orchestration and output for pilot-wave experiments."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .output import Artifact, Check, RunReport, read_columns, write_outputs
from .runner import run_experiment

__all__ = [
    "Artifact",
    "Check",
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "load_config",
    "parse_config",
    "read_columns",
    "run_experiment",
    "write_outputs",
]
