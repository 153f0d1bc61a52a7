"""Desk-scale experiments on the toy datasets.

These helpers back the acceptance suite and the demo scripts: a fixed
20-agent training set for the EM checks, and the intersection run that
tests whether overriding the intention steers an agent to a distinct exit.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, RolloutConfig, TrainConfig
from .metrics import cluster_purity, majority_map, nearest_exit
from .rollout import rollout_scenario
from .scenario import Scenario, generate_toy_dataset
from .training import train

# Trains in about nine minutes on one CPU core. The noise floor is far below
# the default because the toy tracks are noiseless. Input drift teaches the
# model to return to its route, which keeps closed-loop turns from
# overshooting; at model_dim 32 the turn onset stayed too weak to commit.
TOY_MODEL = ModelConfig(model_dim=64, style_dim=16, num_intentions=3, num_heads=4, dropout=0.0,
                        history_window=10, num_map_neighbors=16, noise_scale=0.002,
                        recognition_future=0)
TOY_TRAIN = TrainConfig(epochs=600, batch_size=20, peak_lr=1e-3, warmup_steps=20, final_lr=1e-5,
                        dropout=0.0, init_assignment_steps=600, input_drift_xy=0.05,
                        input_drift_heading=0.03)


def agent_budget_dataset(kind: str, num_agents: int, seed: int = 0, **kwargs) -> list[Scenario]:
    """Toy scenarios holding exactly ``num_agents`` agents in total.

    Scenarios are drawn in order and the last one is cut down to the
    remaining budget, keeping its leading agents.
    """
    out, total, batch = [], 0, 0
    while total < num_agents:
        batch += 1
        for s in generate_toy_dataset(kind, 8 * batch, seed=seed, **kwargs)[len(out):]:
            keep = min(s.num_agents, num_agents - total)
            if keep < s.num_agents:
                meta = dict(s.metadata, intentions=s.metadata["intentions"][:keep])
                s = Scenario(s.id, [step[:keep] for step in s.history],
                             [step[:keep] for step in s.future] if s.future else None,
                             s.map, s.signals, s.step_seconds, meta)
            out.append(s)
            total += keep
            if total == num_agents:
                break
    return out


def exit_polylines(scenario: Scenario) -> dict:
    """Intention index -> exit lane points, from the scenario metadata."""
    lanes = {}
    for f in scenario.map:
        if f.kind == "lane-center":
            lanes.setdefault(f.lane_id, []).append(f.points)
    return {int(k): np.concatenate(lanes[int(lane)]) for k, lane in scenario.metadata["exit_lanes"].items()}


@dataclass
class RoutingReport:
    pairs: list  # (intention override, exit reached)
    purity: float
    mapping: dict  # intention -> majority exit
    seconds: float

    @property
    def distinct_exits(self) -> int:
        return len(set(self.mapping.values()))


def intention_routing(model, scenarios, rollouts_per_scenario: int = 5, horizon: int = 60, agent: int = 0,
                      seed: int = 0, noise=None) -> RoutingReport:
    """Override every agent's intention and record which exit ``agent`` ends nearest to.

    With 4 scenarios, 5 rollouts and 3 intentions this is 60 rollouts.
    """
    start = time.perf_counter()
    cfg = RolloutConfig(horizon=horizon, seed=seed)
    pairs = []
    for z in range(model.cfg.num_intentions):
        for scen in scenarios:
            exits = exit_polylines(scen)
            for r in range(rollouts_per_scenario):
                res = rollout_scenario(model, scen, cfg, r, intentions=z, noise=noise)
                pairs.append((z, nearest_exit(res.poses[-1, agent, :2], exits)))
    return RoutingReport(pairs, cluster_purity(pairs), majority_map(pairs), time.perf_counter() - start)


def train_toy_intersection(num_scenarios: int = 20, seed: int = 0, model_cfg: ModelConfig = TOY_MODEL,
                           train_cfg: TrainConfig = TOY_TRAIN, callback=None):
    data = generate_toy_dataset("intersection-3exit", num_scenarios, seed=seed)
    train_cfg = dataclasses.replace(train_cfg, batch_size=min(train_cfg.batch_size, len(data)))
    return train(data, model_cfg, train_cfg, callback=callback)
