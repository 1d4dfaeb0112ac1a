"""Experiment harness: configs, training jobs, evaluation sweeps and the ``scorebench`` CLI."""

from .config import ConfigError, ExperimentConfig, load_config

__all__ = ["ConfigError", "ExperimentConfig", "load_config"]
