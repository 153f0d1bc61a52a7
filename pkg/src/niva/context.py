"""Gather indices, masks and relative-pose features for a batch of target steps.

Everything here is plain numpy and independent of the network weights, so
a context can be built once per scenario and reused across training steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import FourierMap, normalize_rel, relative_pose
from .encoders import SIGNAL_PHASES, map_features_array, wrap_angle


@dataclass
class SceneArrays:
    """Dense per-scenario arrays; agent tracks may grow during a rollout."""
    poses: np.ndarray  # (T, N, 3)
    speed: np.ndarray  # (T, N)
    valid: np.ndarray  # (T, N)
    kinds: np.ndarray  # (N,)
    map_feats: np.ndarray  # (M, 2 n_points + 1)
    map_kinds: np.ndarray  # (M,)
    map_poses: np.ndarray  # (M, 3)
    signal_phases: np.ndarray  # (G,)
    signal_poses: np.ndarray  # (G, 3)
    dt: float
    history_steps: int

    @property
    def num_steps(self) -> int:
        return self.poses.shape[0]

    @property
    def num_agents(self) -> int:
        return self.poses.shape[1]

    @property
    def token_poses(self) -> np.ndarray:
        return np.concatenate([self.map_poses, self.signal_poses]).reshape(-1, 3)

    def append(self, pose, speed, valid=None):
        n = self.num_agents
        valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        self.poses = np.concatenate([self.poses, np.asarray(pose, dtype=np.float64).reshape(1, n, 3)])
        self.speed = np.concatenate([self.speed, np.asarray(speed, dtype=np.float64).reshape(1, n)])
        self.valid = np.concatenate([self.valid, valid.reshape(1, n)])

    def truncated(self, steps: int) -> "SceneArrays":
        return SceneArrays(self.poses[:steps].copy(), self.speed[:steps].copy(), self.valid[:steps].copy(),
                           self.kinds, self.map_feats, self.map_kinds, self.map_poses,
                           self.signal_phases, self.signal_poses, self.dt, self.history_steps)


def scene_arrays(scenario, cfg, include_future: bool = True) -> SceneArrays:
    poses, speed, valid, kinds = scenario.track_arrays(include_future)
    feats, mkinds = map_features_array(scenario.map, cfg.map_points, cfg.distance_scale)
    mposes = np.array([f.pose() for f in scenario.map]).reshape(-1, 3)
    lane_end = {}
    for f in scenario.map:
        lane_end[f.lane_id] = f.end_pose()
    phases = np.array([SIGNAL_PHASES.index(s.phase) for s in scenario.signals], dtype=np.intp)
    sposes = np.array([lane_end[s.lane_id] for s in scenario.signals]).reshape(-1, 3)
    return SceneArrays(poses, speed, valid, kinds, feats, mkinds, mposes, phases, sposes,
                       float(scenario.step_seconds), scenario.history_steps)


def local_delta(prev, cur) -> np.ndarray:
    """Motion from ``prev`` to ``cur`` (..., 3) expressed in ``prev``'s frame."""
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    c, s = np.cos(prev[..., 2]), np.sin(prev[..., 2])
    dx, dy = cur[..., 0] - prev[..., 0], cur[..., 1] - prev[..., 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(cur[..., 2] - prev[..., 2])], axis=-1)


def apply_delta(prev, delta) -> np.ndarray:
    """Inverse of :func:`local_delta`."""
    prev = np.asarray(prev, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    c, s = np.cos(prev[..., 2]), np.sin(prev[..., 2])
    x = prev[..., 0] + c * delta[..., 0] - s * delta[..., 1]
    y = prev[..., 1] + s * delta[..., 0] + c * delta[..., 1]
    return np.stack([x, y, wrap_angle(prev[..., 2] + delta[..., 2])], axis=-1)


@dataclass
class Context:
    """Per (agent, target step) gather plan. Shapes use N agents, P targets."""
    steps: np.ndarray  # (P,)
    query_poses: np.ndarray  # (N, P, 3), pose at t - 1
    hist_index: np.ndarray  # (N, P, W) flat index t * N + n into agent tokens
    hist_rel: np.ndarray  # (N, P, W, 2m)
    hist_mask: np.ndarray  # (N, P, W)
    map_index: np.ndarray  # (N, P, Lm) into map + signal tokens
    map_rel: np.ndarray
    map_mask: np.ndarray
    nb_index: np.ndarray  # (N, P, La) flat index n' * P + p into current means
    nb_rel: np.ndarray
    nb_mask: np.ndarray
    obs: np.ndarray | None  # (N, P, 3)
    obs_mask: np.ndarray  # (N, P)


def _features(fourier: FourierMap, q, k, cfg) -> np.ndarray:
    return fourier(normalize_rel(relative_pose(q, k), cfg.distance_scale, cfg.time_scale))


def build_context(arrays: SceneArrays, steps, cfg, fourier: FourierMap, target_poses=None) -> Context:
    """Context for predicting each agent's state at every step in ``steps``.

    Step ``t`` conditions on agent tokens at ``t - W .. t - 1``, on the map
    tokens nearest to the pose at ``t - 1`` and on the other agents valid at
    ``t - 1``. Targets beyond the recorded tracks get ``obs_mask`` False.
    ``target_poses`` (T, N, 3) replaces ``arrays.poses`` as the pose each
    target delta leads to, for training on perturbed inputs.
    """
    steps = np.asarray(steps, dtype=np.intp).reshape(-1)
    if np.any(steps < 1) or np.any(steps > arrays.num_steps):
        raise ValueError("target steps must lie in [1, num_steps]")
    tn, n = arrays.num_steps, arrays.num_agents
    p = steps.size
    poses, valid = arrays.poses, arrays.valid
    prev = steps - 1
    qpose = np.transpose(poses[prev], (1, 0, 2))  # (N, P, 3)
    qvalid = valid[prev].T  # (N, P)
    qtime = np.broadcast_to(steps.astype(np.float64), (n, p))
    q4 = np.concatenate([qpose, qtime[..., None]], axis=-1)

    # temporal history
    w = int(steps.max()) if cfg.history_window <= 0 else min(cfg.history_window, int(steps.max()))
    offs = np.arange(w, 0, -1)  # oldest first
    hsteps = steps[:, None] - offs[None, :]  # (P, W)
    in_range = hsteps >= 0
    hs = np.clip(hsteps, 0, tn - 1)
    hvalid = valid[hs] & in_range[..., None]  # (P, W, N)
    hist_mask = np.transpose(hvalid, (2, 0, 1)) & qvalid[..., None]
    agents = np.arange(n)
    hist_index = hs[None, :, :] * n + agents[:, None, None]
    kpose = np.transpose(poses[hs], (2, 0, 1, 3))  # (N, P, W, 3)
    k4 = np.concatenate([kpose, np.broadcast_to(hs.astype(np.float64), (n, p, w))[..., None]], axis=-1)
    hist_rel = _features(fourier, q4[:, :, None, :], k4, cfg)

    # nearest map and signal tokens
    tok = arrays.token_poses
    mtot = tok.shape[0]
    lm = min(cfg.num_map_neighbors, mtot)
    if lm:
        dist = np.hypot(tok[None, None, :, 0] - qpose[..., 0:1], tok[None, None, :, 1] - qpose[..., 1:2])
        map_index = np.argsort(dist, axis=-1, kind="stable")[..., :lm]
        mk = tok[map_index]
        mk4 = np.concatenate([mk, qtime[..., None, None] + np.zeros((n, p, lm, 1))], axis=-1)
        map_rel = _features(fourier, q4[:, :, None, :], mk4, cfg)
        map_mask = np.broadcast_to(qvalid[..., None], (n, p, lm)).copy()
    else:
        map_index = np.zeros((n, p, 0), dtype=np.intp)
        map_rel = np.zeros((n, p, 0, 2 * fourier.m))
        map_mask = np.zeros((n, p, 0), dtype=bool)

    # nearest neighbouring agents at t - 1
    la = min(cfg.num_agent_neighbors, n - 1)
    if la > 0:
        dist = np.hypot(qpose[:, None, :, 0] - qpose[None, :, :, 0],
                        qpose[:, None, :, 1] - qpose[None, :, :, 1])  # (N, N', P)
        dist = np.transpose(dist, (0, 2, 1))  # (N, P, N')
        usable = qvalid.T[None, :, :] & ~np.eye(n, dtype=bool)[:, None, :]
        dist = np.where(usable, dist, np.inf)
        order = np.argsort(dist, axis=-1, kind="stable")[..., :la]
        nb_mask = np.take_along_axis(usable, order, axis=-1) & qvalid[..., None]
        nb_index = order * p + np.arange(p)[None, :, None]
        nb4 = q4[order, np.arange(p)[None, :, None]]
        nb_rel = _features(fourier, q4[:, :, None, :], nb4, cfg)
    else:
        nb_index = np.zeros((n, p, 0), dtype=np.intp)
        nb_rel = np.zeros((n, p, 0, 2 * fourier.m))
        nb_mask = np.zeros((n, p, 0), dtype=bool)

    # observation targets
    have = steps < tn
    obs = np.zeros((n, p, 3))
    obs_mask = np.zeros((n, p), dtype=bool)
    if have.any():
        dest = poses if target_poses is None else np.asarray(target_poses, dtype=np.float64)
        cur = np.transpose(dest[steps[have]], (1, 0, 2))
        obs[:, have] = local_delta(qpose[:, have], cur)
        obs_mask[:, have] = qvalid[:, have] & valid[steps[have]].T
    return Context(steps, qpose, hist_index, hist_rel, hist_mask, map_index, map_rel, map_mask,
                   nb_index, nb_rel, nb_mask, obs if have.any() else None, obs_mask)


@dataclass
class RecognitionContext:
    index: np.ndarray  # (N, T) flat token index
    rel: np.ndarray  # (N, T, 2m)
    mask: np.ndarray  # (N, T)


def build_recognition_context(arrays: SceneArrays, cfg, fourier: FourierMap) -> RecognitionContext:
    """Recorded steps seen from the agent's pose at the last history step.

    ``cfg.recognition_future`` limits how many future steps are visible.
    """
    tn, n = arrays.num_steps, arrays.num_agents
    anchor_t = arrays.history_steps - 1
    anchor = np.concatenate([arrays.poses[anchor_t], np.full((n, 1), float(anchor_t))], axis=-1)
    keys = np.concatenate([np.transpose(arrays.poses, (1, 0, 2)),
                           np.broadcast_to(np.arange(tn, dtype=np.float64), (n, tn))[..., None]], axis=-1)
    rel = _features(fourier, anchor[:, None, :], keys, cfg)
    mask = arrays.valid.T.copy()
    if cfg.recognition_future >= 0:
        mask[:, arrays.history_steps + cfg.recognition_future:] = False
    if not mask.any(axis=1).all():
        raise ValueError("every agent needs at least one valid step for recognition")
    index = np.arange(tn)[None, :] * n + np.arange(n)[:, None]
    return RecognitionContext(index, rel, mask)
