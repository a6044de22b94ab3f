"""Experiment configuration, orchestration, reporting and command-line entry point."""
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import run_experiment
from .report import ReportError, build_report

__all__ = ["ConfigError", "ExperimentConfig", "ReportError", "build_report", "load_config", "run_experiment"]
