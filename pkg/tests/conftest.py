import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedbank.datagen import FederationConfig, generate_federation
from fedbank.models import Batch, ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_quadratic():
    """A two-point regression problem whose full-batch loss is (w^2 + b^2) / 2
    for the single-layer linear model with parameters (w, b)."""
    spec = ModelSpec("mlp", (1, 1), "tanh", "linear-reconstruction")
    batch = Batch(X=np.array([[1.0], [-1.0]]), targets=np.array([[0.0], [0.0]]))
    return spec, batch


@pytest.fixture
def swap_federation():
    """Two planted clusters with swapped label semantics; 10 clients."""
    config = FederationConfig(
        num_clients=10,
        num_clusters=2,
        samples_per_client=120,
        input_dim=6,
        num_classes=2,
        skew_kind="label-swap",
        seed=3,
    )
    clients, public = generate_federation(config)
    return config, clients, public


@pytest.fixture
def iid_federation():
    config = FederationConfig(
        num_clients=6,
        num_clusters=1,
        samples_per_client=100,
        input_dim=5,
        num_classes=2,
        seed=17,
        public_samples=400,
    )
    clients, public = generate_federation(config)
    return config, clients, public
