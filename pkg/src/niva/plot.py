"""Static SVG overlays of map polylines, recorded tracks and sampled rollouts."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PX_PER_M = 4.0  # 1 px = 0.25 m
MARGIN_M = 5.0
PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")
MAP_STYLE = {"lane-center": "#bbbbbb", "road-edge": "#444444", "crosswalk": "#999999", "stop-line": "#cc0000"}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(scenario, rollouts=()) -> str:
    """SVG text for one scenario and any number of rollout scenarios.

    Rollouts are colored by the intention stored in their metadata; the
    recorded future is drawn dashed in black.
    """
    tracks = [np.array([[a.position for a in step] for step in scenario.steps(True)])]
    for r in rollouts:
        tracks.append(np.array([[a.position for a in step] for step in r.steps(True)]))
    pts = [f.points for f in scenario.map] + [t.reshape(-1, 2) for t in tracks]
    allpts = np.concatenate(pts)
    lo = allpts.min(axis=0) - MARGIN_M
    hi = allpts.max(axis=0) + MARGIN_M
    width, height = (hi - lo) * PX_PER_M

    def xy(p):
        return _fmt((p[0] - lo[0]) * PX_PER_M), _fmt((hi[1] - p[1]) * PX_PER_M)

    def path(points, **attrs):
        d = " ".join(("M" if i == 0 else "L") + " {} {}".format(*xy(p)) for i, p in enumerate(points))
        extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        return f'<path d="{d}" fill="none" {extra}/>'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height + 20 * 6)}" '
           f'viewBox="0 0 {_fmt(width)} {_fmt(height + 20 * 6)}">',
           f'<rect width="100%" height="100%" fill="white"/>',
           f'<title>{escape(scenario.id)}</title>']
    for f in scenario.map:
        out.append(path(f.points, stroke=MAP_STYLE.get(f.kind, "#bbbbbb"), stroke_width="1.5"))
    hist = scenario.history_steps
    n = scenario.num_agents
    used = set()
    for r, track in zip(rollouts, tracks[1:]):
        latents = r.metadata.get("latents", [])
        for i in range(n):
            z = latents[i]["z"] if i < len(latents) else 0
            used.add(z)
            color = PALETTE[z % len(PALETTE)]
            out.append(path(track[hist - 1:, i], stroke=color, stroke_width="1.2", stroke_opacity="0.7"))
    truth = tracks[0]
    for i in range(n):
        out.append(path(truth[:hist, i], stroke="#000000", stroke_width="2"))
        if scenario.future:
            out.append(path(truth[hist - 1:, i], stroke="#000000", stroke_width="1.5", stroke_dasharray="6 4"))
    legend_y = height + 16
    out.append(f'<text x="8" y="{_fmt(legend_y)}" font-family="sans-serif" font-size="12">'
               f'black: history, dashed: recorded future</text>')
    for j, z in enumerate(sorted(used)):
        y = legend_y + 18 * (j + 1)
        out.append(f'<line x1="8" y1="{_fmt(y - 4)}" x2="28" y2="{_fmt(y - 4)}" '
                   f'stroke="{PALETTE[z % len(PALETTE)]}" stroke-width="3"/>')
        out.append(f'<text x="34" y="{_fmt(y)}" font-family="sans-serif" font-size="12">intention {z}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
