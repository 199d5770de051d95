"""Experiment configuration, sweeps, gradient checks and the command line."""

from .config import ConfigError, ExperimentConfig, load_config
from .gradcheck import GradcheckReport, gradcheck_task
from .sweep import run_sweep

__all__ = ["ConfigError", "ExperimentConfig", "GradcheckReport", "gradcheck_task", "load_config", "run_sweep"]
