"""Scenario transforms shared by several test modules."""

import numpy as np

from niva.encoders import AgentState, MapFeature
from niva.scenario import Scenario


def rigid_motion(scenario: Scenario, angle: float, shift) -> Scenario:
    """Rotate the whole scene by ``angle`` about the origin, then translate."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    shift = np.asarray(shift, dtype=np.float64)

    def point(p):
        return rot @ np.asarray(p, dtype=np.float64) + shift

    def state(a: AgentState) -> AgentState:
        return AgentState(tuple(point(a.position)), a.heading + angle, a.speed, a.kind, a.valid)

    return Scenario(
        scenario.id,
        [[state(a) for a in step] for step in scenario.history],
        [[state(a) for a in step] for step in scenario.future] if scenario.future else None,
        [MapFeature(np.asarray(f.points) @ rot.T + shift, f.kind, f.lane_id) for f in scenario.map],
        list(scenario.signals),
        scenario.step_seconds,
        dict(scenario.metadata),
    )


def permute_agents(scenario: Scenario, order) -> Scenario:
    order = list(order)
    return Scenario(
        scenario.id,
        [[step[i] for i in order] for step in scenario.history],
        [[step[i] for i in order] for step in scenario.future] if scenario.future else None,
        list(scenario.map), list(scenario.signals), scenario.step_seconds, dict(scenario.metadata),
    )
