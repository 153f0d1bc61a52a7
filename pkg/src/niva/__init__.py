"""Hierarchical latent-variable multi-agent traffic simulation on numpy."""

from .config import ModelConfig, RolloutConfig, TrainConfig
from .model import Niva
from .scenario import Scenario, generate_toy_dataset, read_scenario, write_scenario

__all__ = ["ModelConfig", "RolloutConfig", "TrainConfig", "Niva", "Scenario",
           "generate_toy_dataset", "read_scenario", "write_scenario"]
__version__ = "0.1.0"
