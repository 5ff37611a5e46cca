"""Federated learning under domain skew with feature decoupling and calibration.

A from-scratch numpy simulator: a small reverse-mode tape, a compact CNN,
the decoupler/corrector local objective, domain-aware aggregation and an
experiment runner with a CLI (``f2dc``).
"""
from .config import ExperimentConfig, load_config, parse_config
from .runner import RunResult, run_experiment

__all__ = ["ExperimentConfig", "load_config", "parse_config", "run_experiment", "RunResult"]
__version__ = "0.1.0"
