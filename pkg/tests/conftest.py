import numpy as np
import pytest

from niva.config import ModelConfig
from niva.scenario import generate_toy_dataset

# Small enough that a forward pass takes milliseconds.
TINY = dict(model_dim=16, style_dim=4, num_intentions=3, num_heads=2, fourier_features=8,
            map_points=8, embed_dim=4, num_map_neighbors=8, num_agent_neighbors=2,
            history_window=6, dropout=0.0)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def intersection_scenarios():
    return generate_toy_dataset("intersection-3exit", 4, seed=7, future_steps=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
