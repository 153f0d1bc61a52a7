"""Map, signal and agent-state encoders.

Every continuous input is expressed in the object's own frame before it
reaches the network, which makes the encodings independent of where the
scenario sits in the world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Embedding, Module

MAP_KINDS = ("lane-center", "road-edge", "crosswalk", "stop-line")
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
SIGNAL_PHASES = ("red", "yellow", "green", "unknown")
SPEED_SCALE = 10.0
AGENT_FEATURES = 2  # speed, heading rate


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class MapFeature:
    points: np.ndarray
    kind: str
    lane_id: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a map feature needs at least two (x, y) points")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ValueError("consecutive polyline points must be distinct")
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown map feature kind {self.kind!r}")
        object.__setattr__(self, "points", pts)

    def pose(self) -> np.ndarray:
        """(x, y, heading) at the first point, heading along the first segment."""
        d = self.points[1] - self.points[0]
        return np.array([*self.points[0], np.arctan2(d[1], d[0])])

    def end_pose(self) -> np.ndarray:
        d = self.points[-1] - self.points[-2]
        return np.array([*self.points[-1], np.arctan2(d[1], d[0])])


@dataclass(frozen=True)
class AgentState:
    position: tuple
    heading: float
    speed: float
    kind: str = "vehicle"
    valid: bool = True

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        object.__setattr__(self, "speed", float(self.speed))


@dataclass(frozen=True)
class SignalState:
    lane_id: int
    phase: str = "unknown"

    def __post_init__(self):
        if self.phase not in SIGNAL_PHASES:
            raise ValueError(f"unknown signal phase {self.phase!r}")


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` points at equal arc-length spacing along the polyline."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        raise ValueError("degenerate polyline")
    target = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(target, arc, points[:, 0]),
                     np.interp(target, arc, points[:, 1])], axis=1)


def to_local(points, pose) -> np.ndarray:
    """Express (..., 2) world points in the frame of ``pose`` = (x, y, heading)."""
    c, s = np.cos(pose[2]), np.sin(pose[2])
    d = np.asarray(points, dtype=np.float64) - np.asarray(pose[:2])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def map_features_array(features, n_points: int, distance_scale: float):
    """Continuous map inputs (M, 2 n_points + 1) and kind indices (M,)."""
    rows, kinds = [], []
    for f in features:
        pts = resample_polyline(f.points, n_points)
        local = to_local(pts, f.pose()) / distance_scale
        length = np.sum(np.linalg.norm(np.diff(f.points, axis=0), axis=1)) / distance_scale
        rows.append(np.concatenate([local.reshape(-1), [length]]))
        kinds.append(MAP_KINDS.index(f.kind))
    width = 2 * n_points + 1
    return np.asarray(rows, dtype=np.float64).reshape(-1, width), np.asarray(kinds, dtype=np.intp)


def agent_features_array(poses, speed, valid, dt: float):
    """Per-step motion features (T, N, 2): scaled speed and heading rate.

    The first step, and any step whose predecessor is invalid, gets a zero
    rate. Second differences such as acceleration are left out on purpose:
    in closed loop they are rebuilt from sampled displacements, and dividing
    small displacement errors by the step length twice turns them into
    inputs far outside anything seen in training.
    """
    poses = np.asarray(poses, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    rate = np.zeros_like(speed)
    if len(speed) > 1:
        both = valid[1:] & valid[:-1]
        rate[1:] = np.where(both, wrap_angle(poses[1:, :, 2] - poses[:-1, :, 2]), 0.0) / dt  # rad/s
    feats = np.stack([speed / SPEED_SCALE, rate], axis=-1)
    return np.where(valid[..., None], feats, 0.0)


class MapEncoder(Module):
    def __init__(self, rng, n_points: int, embed_dim: int, dim: int, dropout: float = 0.0):
        self.kind = Embedding(rng, len(MAP_KINDS), embed_dim)
        self.mlp = MLP(rng, embed_dim + 2 * n_points + 1, dim, dim, dropout)

    def __call__(self, feats, kinds):
        return self.mlp(T.concat([self.kind(kinds), T.Tensor(feats)], axis=-1))


class SignalEncoder(Module):
    def __init__(self, rng, embed_dim: int, dim: int, dropout: float = 0.0):
        self.phase = Embedding(rng, len(SIGNAL_PHASES), embed_dim)
        self.mlp = MLP(rng, embed_dim, dim, dim, dropout)

    def __call__(self, phases):
        return self.mlp(self.phase(phases))


class AgentEncoder(Module):
    def __init__(self, rng, embed_dim: int, dim: int, dropout: float = 0.0):
        self.kind = Embedding(rng, len(AGENT_KINDS), embed_dim)
        self.mlp = MLP(rng, embed_dim + AGENT_FEATURES, dim, dim, dropout)

    def __call__(self, feats, kinds, valid):
        """feats (T, N, 2), kinds (N,), valid (T, N) -> tokens (T, N, D)."""
        feats = np.asarray(feats)
        emb = self.kind(np.broadcast_to(np.asarray(kinds), feats.shape[:-1]))
        out = self.mlp(T.concat([emb, T.Tensor(feats)], axis=-1))
        valid = np.asarray(valid, dtype=bool)
        return out if valid.all() else out * valid[..., None]


class Encoders(Module):
    def __init__(self, rng, cfg):
        self.map = MapEncoder(rng, cfg.map_points, cfg.embed_dim, cfg.model_dim, cfg.dropout)
        self.signal = SignalEncoder(rng, cfg.embed_dim, cfg.model_dim, cfg.dropout)
        self.agent = AgentEncoder(rng, cfg.embed_dim, cfg.model_dim, cfg.dropout)
        self.cfg = cfg


def encode_map(f: MapFeature, enc: Encoders) -> np.ndarray:
    feats, kinds = map_features_array([f], enc.cfg.map_points, enc.cfg.distance_scale)
    return enc.map(feats, kinds).data[0]


def encode_agent_state(s: AgentState, enc: Encoders, prev: AgentState | None = None,
                       dt: float = 0.1) -> np.ndarray:
    states = [prev, s] if prev is not None else [s]
    poses = np.array([[[*st.position, st.heading]] for st in states])
    speed = np.array([[st.speed] for st in states])
    valid = np.array([[st.valid] for st in states])
    feats = agent_features_array(poses, speed, valid, dt)[-1:]
    kind = np.array([AGENT_KINDS.index(s.kind)])
    return enc.agent(feats, kind, valid[-1:]).data[0, 0]


def encode_signal(sig: SignalState, enc: Encoders) -> np.ndarray:
    return enc.signal(np.array([SIGNAL_PHASES.index(sig.phase)])).data[0]
