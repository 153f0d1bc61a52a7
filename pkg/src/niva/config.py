"""Configuration records for the model, training and rollouts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

OBS_DIM = 3
STEP_SECONDS = 0.1


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    style_dim: int = 16
    num_intentions: int = 6
    num_heads: int = 4
    num_temporal_layers: int = 1
    num_blocks: int = 1
    fourier_features: int = 32
    fourier_scale: float = 1.0
    map_points: int = 16
    embed_dim: int = 8
    num_map_neighbors: int = 64
    num_agent_neighbors: int = 5
    history_window: int = 0  # 0 keeps every past step
    intent_init_scale: float = 1.0
    recognition_future: int = -1  # future steps visible to recognition; -1 means all
    noise_scale: float = 0.1
    train_noise: bool = False
    dropout: float = 0.1
    distance_scale: float = 20.0
    time_scale: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.num_intentions < 1 or self.noise_scale <= 0:
            raise ValueError("need num_intentions >= 1 and noise_scale > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 12
    peak_lr: float = 2e-4
    warmup_steps: int = 1000
    final_lr: float = 3e-7
    weight_decay: float = 0.01
    dropout: float = 0.1
    use_dirichlet: bool = False
    dirichlet_prior: float = 1.0
    soft_assignment: bool = False
    grad_clip: float = 1.0
    estep_marginal: str = "closed"  # "closed" scores refined marginals, "open" the temporal prior only
    init_assignment_steps: int = 0  # steps that use k-means assignments before exact E-steps
    input_drift_xy: float = 0.0  # per-step std (m) of a random-walk offset added to input poses
    input_drift_heading: float = 0.0  # same for heading (rad)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.input_drift_xy < 0 or self.input_drift_heading < 0:
            raise ValueError("input drift must be >= 0")
        if self.estep_marginal not in ("closed", "open"):
            raise ValueError("estep_marginal must be 'closed' or 'open'")


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 80
    num_rollouts: int = 32
    patch_size: int = 1
    condition_on_truth: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.patch_size < 1 or self.num_rollouts < 1:
            raise ValueError("horizon, patch_size and num_rollouts must all be >= 1")


def _coerce(field_type, text: str):
    if field_type in (bool, "bool"):
        lowered = text.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return lowered in ("true", "1", "yes")
    if field_type in (int, "int"):
        return int(text)
    if field_type in (float, "float"):
        return float(text)
    return text


def apply_overrides(configs: dict, overrides: list[str]) -> dict:
    """Apply dotted ``section.key=value`` overrides onto frozen dataclasses.

    ``configs`` maps a section name (``model``, ``train``, ``rollout``) to a
    config instance. Unknown sections or keys raise ``KeyError``.
    """
    updates: dict[str, dict] = {name: {} for name in configs}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        if "." not in key:
            raise KeyError(f"override key needs a section prefix: {key!r}")
        section, name = key.split(".", 1)
        if section not in configs:
            raise KeyError(f"unknown config section {section!r}")
        fields = {f.name: f.type for f in dataclasses.fields(configs[section])}
        if name not in fields:
            raise KeyError(f"unknown key {name!r} in section {section!r}")
        updates[section][name] = _coerce(fields[name], value)
    return {name: dataclasses.replace(cfg, **updates[name]) for name, cfg in configs.items()}
