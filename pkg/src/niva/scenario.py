"""Scenarios, synthetic toy datasets and the JSON-lines scenario format."""

from __future__ import annotations

import fcntl
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .config import STEP_SECONDS
from .encoders import AgentState, MapFeature, SignalState, wrap_angle

SCENARIO_FORMAT_VERSION = 1
KINDS = ("intersection-3exit", "straight-road", "merge")

MAX_SPEED = 20.0
MAX_HEADING_STEP = 0.15


class FormatError(ValueError):
    """Malformed or incompatible file."""


@dataclass
class Scenario:
    id: str
    history: list  # T_h lists of N AgentState
    future: list | None = None  # T_p lists of N AgentState
    map: list = field(default_factory=list)
    signals: list = field(default_factory=list)
    step_seconds: float = STEP_SECONDS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.history) < 1:
            raise ValueError("a scenario needs at least one history step")
        n = len(self.history[0])
        for step in list(self.history) + list(self.future or []):
            if len(step) != n:
                raise ValueError("all steps must hold the same number of agents")
        lanes = {f.lane_id for f in self.map}
        for sig in self.signals:
            if sig.lane_id not in lanes:
                raise ValueError(f"signal references unknown lane {sig.lane_id}")

    @property
    def num_agents(self) -> int:
        return len(self.history[0])

    @property
    def history_steps(self) -> int:
        return len(self.history)

    @property
    def future_steps(self) -> int:
        return len(self.future) if self.future else 0

    def steps(self, include_future: bool = True) -> list:
        return list(self.history) + (list(self.future) if include_future and self.future else [])

    def track_arrays(self, include_future: bool = True):
        """poses (T, N, 3), speed (T, N), valid (T, N), kinds (N,)."""
        from .encoders import AGENT_KINDS

        steps = self.steps(include_future)
        poses = np.array([[[*a.position, a.heading] for a in step] for step in steps], dtype=np.float64)
        speed = np.array([[a.speed for a in step] for step in steps], dtype=np.float64)
        valid = np.array([[a.valid for a in step] for step in steps], dtype=bool)
        kinds = np.array([AGENT_KINDS.index(a.kind) for a in self.history[0]], dtype=np.intp)
        return poses.reshape(len(steps), self.num_agents, 3), speed, valid, kinds

    def __eq__(self, other):
        return isinstance(other, Scenario) and scenario_to_dict(self) == scenario_to_dict(other)


def states_from_arrays(poses, speed, valid=None, kinds=None) -> list:
    from .encoders import AGENT_KINDS

    poses = np.asarray(poses)
    t, n = poses.shape[:2]
    valid = np.ones((t, n), dtype=bool) if valid is None else np.asarray(valid)
    kinds = np.zeros(n, dtype=int) if kinds is None else np.asarray(kinds)
    return [[AgentState((poses[i, j, 0], poses[i, j, 1]), poses[i, j, 2], max(0.0, float(speed[i, j])),
                        AGENT_KINDS[int(kinds[j])], bool(valid[i, j])) for j in range(n)]
            for i in range(t)]


# --- serialization -----------------------------------------------------------

def _encode(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise FormatError("non-finite float in scenario")
        text = format(x, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _state_dict(a: AgentState) -> dict:
    return {"position": list(a.position), "heading": a.heading, "speed": a.speed,
            "kind": a.kind, "valid": a.valid}


def scenario_to_dict(s: Scenario) -> dict:
    out = {
        "format_version": SCENARIO_FORMAT_VERSION,
        "id": s.id,
        "step_seconds": float(s.step_seconds),
        "history": [[_state_dict(a) for a in step] for step in s.history],
        "future": None if s.future is None else [[_state_dict(a) for a in step] for step in s.future],
        "map": [{"points": f.points.tolist(), "kind": f.kind, "lane_id": int(f.lane_id)} for f in s.map],
        "signals": [{"lane_id": int(g.lane_id), "phase": g.phase} for g in s.signals],
        "metadata": s.metadata,
    }
    return out


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format_version") != SCENARIO_FORMAT_VERSION:
        raise FormatError(f"unsupported scenario format_version {d.get('format_version')!r}")
    try:
        def states(rows):
            return [[AgentState(tuple(a["position"]), a["heading"], a["speed"], a["kind"], a["valid"])
                     for a in step] for step in rows]

        return Scenario(
            id=d["id"],
            history=states(d["history"]),
            future=None if d["future"] is None else states(d["future"]),
            map=[MapFeature(np.array(f["points"], dtype=np.float64), f["kind"], f["lane_id"]) for f in d["map"]],
            signals=[SignalState(g["lane_id"], g["phase"]) for g in d["signals"]],
            step_seconds=d["step_seconds"],
            metadata=d.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"malformed scenario record: {err}") from err


def dumps_record(d: dict) -> str:
    return _encode(d)


def atomic_write(path, data: bytes):
    """Write via a temp file in the same directory, then rename.

    Writers hold an exclusive lock on the directory for the duration, so
    concurrent writers of the same file serialize; readers never see a
    partial file.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    dir_fd = os.open(directory, os.O_RDONLY)
    try:
        fcntl.flock(dir_fd, fcntl.LOCK_EX)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    finally:
        fcntl.flock(dir_fd, fcntl.LOCK_UN)
        os.close(dir_fd)


def write_records(path, records):
    atomic_write(path, "".join(dumps_record(r) + "\n" for r in records).encode("utf-8"))


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from err
    return out


def write_scenario(path, scenarios):
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    write_records(path, [scenario_to_dict(s) for s in scenarios])


def read_scenario(path) -> list[Scenario]:
    return [scenario_from_dict(d) for d in read_records(path)]


# --- toy geometry --------------------------------------------------------------

def _line(p0, p1, spacing=0.5):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / spacing)) + 1)
    return np.linspace(p0, p1, n)


def _arc(center, radius, a0, a1, spacing=0.5):
    n = max(3, int(np.ceil(abs(a1 - a0) * radius / spacing)) + 1)
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _join(*parts):
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def _chunks(points, lane_id, kind="lane-center", max_len=15.0):
    """Split a polyline into map features of bounded arc length."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(np.ceil(arc[-1] / max_len)))
    edges = np.linspace(0.0, arc[-1], n + 1)
    feats = []
    for a, b in zip(edges[:-1], edges[1:]):
        inner = points[(arc > a + 1e-9) & (arc < b - 1e-9)]
        p0 = [np.interp(a, arc, points[:, 0]), np.interp(a, arc, points[:, 1])]
        p1 = [np.interp(b, arc, points[:, 0]), np.interp(b, arc, points[:, 1])]
        feats.append(MapFeature(np.vstack([p0, inner, p1]) if len(inner) else np.array([p0, p1]),
                                kind, lane_id))
    return feats


@dataclass(frozen=True)
class ToyLayout:
    """Static geometry of a toy map: route polylines and drawn features."""
    routes: dict  # intention index -> polyline the agent follows
    lanes: dict  # lane_id -> centerline
    extra: tuple = ()  # (points, kind, lane_id) for non-lane features
    signal_lanes: tuple = ()
    exits: dict = field(default_factory=dict)  # intention -> lane_id of the exit


def intersection_layout() -> ToyLayout:
    """Approach from the south; left, straight and right exits, turn radius 8 m."""
    approach = _line((0.0, -70.0), (0.0, -8.0))
    left = _join(_arc((-8.0, -8.0), 8.0, 0.0, np.pi / 2), _line((-8.0, 0.0), (-70.0, 0.0)))
    straight = _line((0.0, -8.0), (0.0, 70.0))
    right = _join(_arc((8.0, -8.0), 8.0, np.pi, np.pi / 2), _line((8.0, 0.0), (70.0, 0.0)))
    lanes = {1: approach, 2: left, 3: straight, 4: right}
    routes = {0: _join(approach, left), 1: _join(approach, straight), 2: _join(approach, right)}
    extra = ((np.array([[-3.0, -8.0], [3.0, -8.0]]), "stop-line", 1),
             (np.array([[-3.0, -10.5], [3.0, -10.5]]), "crosswalk", 1))
    return ToyLayout(routes, lanes, extra, signal_lanes=(1,), exits={0: 2, 1: 3, 2: 4})


def straight_road_layout() -> ToyLayout:
    """Three parallel lanes along +x; keep, change left, change right."""
    xs = np.arange(-80.0, 120.0 + 1e-9, 0.5)

    def shifted(y0, dy):
        blend = 1.0 / (1.0 + np.exp(-(xs - 10.0) / 6.0))
        return np.stack([xs, y0 + dy * blend], axis=1)

    lanes = {1: _line((-80.0, -3.5), (120.0, -3.5)), 2: _line((-80.0, 0.0), (120.0, 0.0)),
             3: _line((-80.0, 3.5), (120.0, 3.5))}
    routes = {0: shifted(0.0, 0.0), 1: shifted(0.0, 3.5), 2: shifted(0.0, -3.5)}
    extra = ((np.array([[-80.0, -5.25], [120.0, -5.25]]), "road-edge", 0),
             (np.array([[-80.0, 5.25], [120.0, 5.25]]), "road-edge", 0))
    return ToyLayout(routes, lanes, extra, exits={0: 2, 1: 3, 2: 1})


def merge_layout() -> ToyLayout:
    """Main lane along +x and an on-ramp joining it at x = 0."""
    main = _line((-90.0, 0.0), (110.0, 0.0))
    xs = np.arange(-90.0, 0.0 + 1e-9, 0.5)
    ramp = np.stack([xs, -12.0 * (0.5 - 0.5 * np.cos(np.pi * np.clip(xs / -90.0, 0, 1)))], axis=1)
    ramp_route = _join(ramp, _line((0.0, 0.0), (110.0, 0.0)))
    lanes = {1: main, 2: ramp}
    routes = {0: main, 1: ramp_route}
    return ToyLayout(routes, lanes, exits={0: 1, 1: 1})


LAYOUTS = {"intersection-3exit": intersection_layout, "straight-road": straight_road_layout,
           "merge": merge_layout}


def layout_map(layout: ToyLayout):
    feats = []
    for lane_id, pts in layout.lanes.items():
        feats.extend(_chunks(pts, lane_id))
    for pts, kind, lane_id in layout.extra:
        feats.extend(_chunks(pts, lane_id, kind))
    return feats


def follow_route(route, s0, v0, v_target, steps, dt=STEP_SECONDS, accel=2.0, decel=3.0):
    """Arc-length kinematics along ``route``: returns poses (steps, 3) and speeds.

    Speed relaxes toward ``v_target`` with bounded acceleration; heading is the
    route tangent, so the track is consistent with unicycle motion.
    """
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    tangent = np.unwrap(np.arctan2(np.diff(route[:, 1]), np.diff(route[:, 0])))
    tangent = np.concatenate([tangent, tangent[-1:]])
    s, v = float(s0), float(v0)
    poses, speeds = [], []
    for _ in range(steps):
        poses.append([np.interp(s, arc, route[:, 0]), np.interp(s, arc, route[:, 1]),
                      wrap_angle(np.interp(s, arc, tangent))])
        speeds.append(v)
        a = np.clip((v_target - v) / 1.0, -decel, accel)
        v_next = float(np.clip(v + a * dt, 0.0, MAX_SPEED))
        s += 0.5 * (v + v_next) * dt
        v = v_next
    return np.array(poses), np.array(speeds)


def generate_toy_dataset(kind: str, n_scenarios: int, seed: int = 0, history_steps: int = 11,
                         future_steps: int = 60, max_agents: int = 3) -> list[Scenario]:
    """Deterministic toy scenarios with scripted per-agent intentions.

    Agents on one route are spaced 10 m apart and followers never drive
    faster than their leader. At the intersection every agent completes its
    turn within the default horizon, so the intention is always observable.
    ``metadata`` keeps the intention label of every agent and the exit lane
    each intention leads to.
    """
    if kind not in LAYOUTS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    layout = LAYOUTS[kind]()
    map_feats = layout_map(layout)
    signals = [SignalState(lane, "green") for lane in layout.signal_lanes]
    rng = np.random.default_rng(np.random.SeedSequence([seed, KINDS.index(kind)]))
    total = history_steps + future_steps
    n_routes = len(layout.routes)
    out = []
    for i in range(n_scenarios):
        n_agents = int(rng.integers(1, max_agents + 1))
        intents, tracks, speeds = [], [], []
        lead_speed = None
        for a in range(n_agents):
            k = int(rng.integers(0, n_routes))
            if kind == "merge":
                k = a % 2 if n_agents > 1 else int(rng.integers(0, 2))
            route = layout.routes[k]
            v_target = float(rng.uniform(7.0, 9.0))
            if lead_speed is not None and kind != "merge":
                v_target = min(v_target, lead_speed)
            lead_speed = v_target
            v0 = float(np.clip(v_target + rng.uniform(-0.5, 0.5), 6.5, 9.5))
            if kind == "intersection-3exit":
                s0 = float(rng.uniform(48.0, 52.0)) - 10.0 * a
            elif kind == "straight-road":
                s0 = float(rng.uniform(20.0, 30.0)) + 10.0 * a
            else:
                s0 = float(rng.uniform(10.0, 20.0)) + (10.0 * (a // 2))
            poses, sp = follow_route(route, s0, v0, v_target, total)
            intents.append(k)
            tracks.append(poses)
            speeds.append(sp)
        poses = np.stack(tracks, axis=1)
        speed = np.stack(speeds, axis=1)
        states = states_from_arrays(poses, speed)
        out.append(Scenario(
            id=f"{kind}-{seed}-{i:05d}",
            history=states[:history_steps],
            future=states[history_steps:] if future_steps else None,
            map=map_feats,
            signals=signals,
            metadata={"kind": kind, "intentions": intents,
                      "exit_lanes": {str(k): v for k, v in layout.exits.items()}},
        ))
    return out
