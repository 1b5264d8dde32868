"""Experiment harness: configuration, runners and the command-line interface."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runners import RunReport, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "RunReport", "load_config", "parse_config", "run_experiment"]
