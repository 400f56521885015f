"""Pytest fixtures for fedlsi tests."""

from __future__ import annotations

import copy
from typing import Any

import numpy as np
import pytest
from dotenv import load_dotenv

from fedlsi.config import ExperimentConfig, config_from_dict
from fedlsi.data import (
    DomainDataset,
    DomainShift,
    FederationSplit,
    SyntheticSpec,
    generate_rotated_blobs,
    leave_one_out_split,
)
from fedlsi.layers import ClassifierHead

# Load environment variables from .env file
load_dotenv()

FAST_CONFIG: dict[str, Any] = {
    "data": {
        "classes": 3,
        "angles": [0, 45, 90],
        "samples_per_domain": 60,
        "ambient_dim": 6,
        "noise": 0.3,
        "val_fraction": 0.2,
    },
    "model": {"hidden": [8], "latent": 4},
    "optimizer": {"lr": 0.05, "batch_size": 16},
    "rounds": {"rounds": 2, "local_epochs": 1},
    "synth": {"lr": 0.05, "steps": 20, "samples": 12, "batch_size": 6},
    "gan": {"g_lr": 0.001, "d_lr": 0.001, "steps": 10, "batch_size": 8, "hidden": 8},
    "seeds": [0],
}


@pytest.fixture
def rng() -> np.random.Generator:
    """Get a seeded generator."""
    return np.random.default_rng(0)


@pytest.fixture
def small_spec() -> SyntheticSpec:
    """Three-domain, three-class recipe with a 6-D ambient space."""
    return SyntheticSpec(
        classes=3,
        domains=(DomainShift(0.0), DomainShift(45.0), DomainShift(90.0)),
        noise=0.3,
        samples_per_domain=60,
        ambient_dim=6,
    )


@pytest.fixture
def domains(small_spec: SyntheticSpec) -> list[DomainDataset]:
    """Generate the small domains."""
    return generate_rotated_blobs(small_spec, seed=0)


@pytest.fixture
def split(domains: list[DomainDataset]) -> FederationSplit:
    """Hold out the last domain."""
    return leave_one_out_split(domains, unseen_id=2, val_fraction=0.2, seed=0)


@pytest.fixture
def head(rng: np.random.Generator) -> ClassifierHead:
    """Create a head with non-trivial running statistics."""
    head = ClassifierHead(4, 3, rng)
    head.bn.running_mean[...] = rng.normal(0.0, 1.0, 4)
    head.bn.running_var[...] = rng.uniform(0.5, 2.0, 4)
    return head


@pytest.fixture
def fast_document() -> dict[str, Any]:
    """Get a fresh copy of the fast config document."""
    return copy.deepcopy(FAST_CONFIG)


@pytest.fixture
def fast_config(fast_document: dict[str, Any]) -> ExperimentConfig:
    """Create a config small enough for unit tests."""
    return config_from_dict(fast_document)
