"""Experiment harness: configs, runner, and post-hoc analyses."""

from .config import ConfigError, ExperimentConfig  # noqa: F401
