"""Federated domain generalization simulator with latent space inversion."""

from __future__ import annotations

from .config import ExperimentConfig, parse_config
from .coordinator import (
    ExperimentReport,
    FederationCoordinator,
    run_fedavg,
    run_pipeline,
)
from .errors import FedLsiError

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "FedLsiError",
    "FederationCoordinator",
    "parse_config",
    "run_fedavg",
    "run_pipeline",
]
