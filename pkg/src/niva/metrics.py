"""Rollout metrics: minADE, footprint collisions, off-road fraction, exit purity."""

from __future__ import annotations

import csv
import io
from collections import Counter

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon
from shapely.ops import unary_union

FOOTPRINTS = {"vehicle": (4.5, 2.0), "pedestrian": (0.8, 0.8), "cyclist": (1.8, 0.6)}
LANE_HALF_WIDTH = 1.75


def min_ade(rollouts, truth) -> float:
    """Minimum over rollouts of the mean displacement on (x, y).

    ``rollouts`` is (R, T, N, >=2) or a list of (T, N, >=2); ``truth`` is (T, N, >=2).
    Invalid truth entries may be given as NaN and are skipped.
    """
    truth = np.asarray(truth, dtype=np.float64)
    rollouts = [np.asarray(r, dtype=np.float64) for r in rollouts]
    if not rollouts:
        raise ValueError("need at least one rollout")
    best = np.inf
    for r in rollouts:
        if r.shape[:2] != truth.shape[:2]:
            raise ValueError(f"rollout shape {r.shape[:2]} does not match truth {truth.shape[:2]}")
        err = np.hypot(r[..., 0] - truth[..., 0], r[..., 1] - truth[..., 1])
        ok = np.isfinite(err)
        if not ok.any():
            raise ValueError("no valid truth entries")
        # mean over steps per agent, then over agents
        per_agent = np.nansum(np.where(ok, err, 0.0), axis=0) / np.maximum(ok.sum(axis=0), 1)
        best = min(best, float(per_agent[ok.any(axis=0)].mean()))
    return best


def footprint(pose, kind: str = "vehicle", dims=None) -> Polygon:
    if dims is None:
        if kind not in FOOTPRINTS:
            raise ValueError(f"no footprint for agent kind {kind!r}")
        dims = FOOTPRINTS[kind]
    length, width = dims
    x, y, h = pose
    c, s = np.cos(h), np.sin(h)
    corners = np.array([[0.5 * length, 0.5 * width], [-0.5 * length, 0.5 * width],
                        [-0.5 * length, -0.5 * width], [0.5 * length, -0.5 * width]])
    rot = corners @ np.array([[c, s], [-s, c]])
    return Polygon(rot + [x, y])


def collision_rate(poses, kinds=None, valid=None, dims=None) -> float:
    """Fraction of agents whose oriented footprint overlaps another at any step.

    ``poses`` (T, N, 3). ``dims`` optionally maps agent index to (length, width).
    """
    poses = np.asarray(poses, dtype=np.float64)
    t, n = poses.shape[:2]
    if n < 2:
        return 0.0
    kinds = ["vehicle"] * n if kinds is None else list(kinds)
    valid = np.ones((t, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for step in range(t):
        idx = np.flatnonzero(valid[step])
        polys = [footprint(poses[step, i], kinds[i], None if dims is None else dims[i]) for i in idx]
        tree = shapely.STRtree(polys)
        left, right = tree.query(polys, predicate="intersects")
        for a, b in zip(left, right):
            if a != b and polys[a].intersection(polys[b]).area > 0:
                hit[idx[a]] = hit[idx[b]] = True
    return float(hit.mean())


def drivable_area(map_features, half_width: float = LANE_HALF_WIDTH):
    lanes = [LineString(f.points) for f in map_features if f.kind == "lane-center"]
    if not lanes:
        raise ValueError("map has no lane centerlines")
    return unary_union([lane.buffer(half_width, cap_style="flat") for lane in lanes]).buffer(1e-9)


def offroad_rate(poses, map_features, valid=None, half_width: float = LANE_HALF_WIDTH) -> float:
    """Fraction of valid (step, agent) centers outside the lane corridors."""
    poses = np.asarray(poses, dtype=np.float64)
    valid = np.ones(poses.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    area = drivable_area(map_features, half_width)
    pts = poses[valid][:, :2]
    if len(pts) == 0:
        return 0.0
    inside = shapely.contains_xy(area, pts[:, 0], pts[:, 1])
    return float(1.0 - inside.mean())


def nearest_exit(point, exits: dict) -> int:
    """Key of the exit polyline closest to ``point``; ties go to the lowest key."""
    best_key, best_dist = None, np.inf
    for key in sorted(exits):
        pts = np.asarray(exits[key])
        d = LineString(pts).distance(shapely.Point(point[0], point[1]))
        if d < best_dist:
            best_key, best_dist = key, d
    return best_key


def cluster_purity(pairs) -> float:
    """Share of items that fall in their group's majority cluster.

    ``pairs`` is an iterable of (group, cluster) labels.
    """
    counts = Counter(pairs)
    groups = {g for g, _ in counts}
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no items")
    return sum(max(c for (g2, _), c in counts.items() if g2 == g) for g in groups) / total


def majority_map(pairs) -> dict:
    counts = Counter(pairs)
    out = {}
    for g in sorted({g for g, _ in counts}):
        options = sorted((-c, k) for (g2, k), c in counts.items() if g2 == g)
        out[g] = options[0][1]
    return out


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                         for k, v in row.items()})
    return buf.getvalue()
