import pytest
import numpy as np
import sys
import os

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config.run_config import RunConfig
from src.services.encoders import build_model
from src.services.synthdata import generate_dataset, stack_batch


@pytest.fixture
def toy_config():
    """Default toy configuration."""
    return RunConfig()


@pytest.fixture
def small_config():
    """Toy model with a small dataset and short training for fast tests."""
    return RunConfig.from_mapping(
        {
            "data.n_pairs": "24",
            "data.n_test": "8",
            "train.batch_size": "4",
            "train.epochs": "1",
        }
    )


@pytest.fixture
def toy_state(toy_config):
    """Freshly initialized model state (zero-init adapters)."""
    return build_model(toy_config)


@pytest.fixture
def perturbed_state(toy_config):
    """Model state with seeded nonzero W_up, calibration and tau inside its clamp range."""
    state = build_model(toy_config)
    rng = np.random.default_rng(7)
    for path, param in state.tunable.items():
        if path.endswith(".w_up") or path.endswith(".fc2.w"):
            param.data += 0.1 * rng.standard_normal(param.shape)
    state.tau.data[0] = 20.0
    return state


@pytest.fixture
def small_dataset(small_config):
    """24 generated pairs."""
    return generate_dataset(small_config.data)


@pytest.fixture
def pair_batch(toy_config):
    """Forward and reversed sample of appearance 0: (frames, tokens)."""
    spec = toy_config.data.model_copy(update={"n_pairs": 2, "n_test": 0})
    return stack_batch(generate_dataset(spec).samples)


@pytest.fixture(autouse=True)
def reset_registry():
    """Clear the served task registry around each test."""
    from src.api import routes
    routes.registry = None
    yield
    routes.registry = None
