"""Parametric synthetic road layouts.

Each template yields a library of reference paths (documented path counts)
plus route-building helpers used by the episode simulator. All geometry is
deterministic given the template parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InvalidParams
from .static_env import (
    ReferencePath,
    annotate_topology,
    dump_scene,
    fit_reference_path,
    with_ref_points,
)

LANE_OFFSET = 1.75     # half a 3.5 m lane
APPROACH_LEN = 28.0
OUTER_WIDTH = 6.0      # radial offset of spiral start/end from the ring

KINDS = ("roundabout", "t-intersection", "merge", "lane-change")


@dataclass(frozen=True, eq=False)
class MapTemplate:
    kind: str
    params: dict
    paths: dict[str, ReferencePath]

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, **dump_scene(self.paths.values())}


def _arc(cx: float, cy: float, r: float, a0: float, a1: float, step_deg: float = 2.0):
    n = max(2, int(abs(a1 - a0) / math.radians(step_deg)) + 1)
    t = np.linspace(a0, a1, n)
    return np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)


# ---------------------------------------------------------------------------
# roundabout


def _spiral(radius: float, a0: float, a1: float, w0: float, w1: float, n: int = 48):
    """Polar blend from radius+w0 at a0 to radius+w1 at a1 (quadratic ease)."""
    t = np.linspace(0.0, 1.0, n)
    if w0 != 0.0:   # easing in: offset shrinks quadratically
        rho = radius + w0 * (1.0 - t) ** 2
    else:           # easing out
        rho = radius + w1 * t**2
    ang = a0 + (a1 - a0) * t
    return np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=1)


def _spiral_width_deg(n_ways: int) -> float:
    return min(35.0, (360.0 / n_ways - 12.0) / 2.0)


def _prepend_straight(points: np.ndarray, length: float) -> np.ndarray:
    head = points[1] - points[0]
    head = head / np.hypot(*head)
    back = points[0] - head * np.linspace(length, length / 12.0, 12)[:, None]
    return np.vstack([back, points])


def _append_straight(points: np.ndarray, length: float) -> np.ndarray:
    head = points[-1] - points[-2]
    head = head / np.hypot(*head)
    fwd = points[-1] + head * np.linspace(length / 12.0, length, 12)[:, None]
    return np.vstack([points, fwd])


def _roundabout_entry_points(
    radius: float, n_ways: int, way: int, ring_ext_deg: float = 0.0
) -> np.ndarray:
    w = math.radians(_spiral_width_deg(n_ways))
    a0 = 2 * math.pi * way / n_ways + math.radians(5.0)
    pts = _spiral(radius, a0, a0 + w, OUTER_WIDTH, 0.0)
    if ring_ext_deg > 0:  # continue along the ring so merges classify as such
        ext = _arc(0.0, 0.0, radius, a0 + w, a0 + w + math.radians(ring_ext_deg))
        pts = np.vstack([pts, ext[1:]])
    return _prepend_straight(pts, APPROACH_LEN)


def _roundabout_exit_points(
    radius: float, n_ways: int, way: int, ring_ext_deg: float = 0.0
) -> np.ndarray:
    w = math.radians(_spiral_width_deg(n_ways))
    a1 = 2 * math.pi * way / n_ways - math.radians(5.0)
    pts = _spiral(radius, a1 - w, a1, 0.0, OUTER_WIDTH)
    if ring_ext_deg > 0:
        ext = _arc(0.0, 0.0, radius, a1 - w - math.radians(ring_ext_deg), a1 - w)
        pts = np.vstack([ext[:-1], pts])
    return _append_straight(pts, APPROACH_LEN)


def roundabout_merge_angle(radius: float, n_ways: int, way: int) -> float:
    """Ring angle where an entry reaches the circulating lane."""
    return 2 * math.pi * way / n_ways + math.radians(5.0 + _spiral_width_deg(n_ways))


def roundabout_depart_angle(radius: float, n_ways: int, way: int) -> float:
    return 2 * math.pi * way / n_ways - math.radians(5.0 + _spiral_width_deg(n_ways))


def roundabout_route_waypoints(params: Mapping, entry: int, exit: int) -> np.ndarray:
    """Entry spiral, circulating arc, exit spiral for one route."""
    radius, n_ways = params["radius"], params["n_ways"]
    a_in = roundabout_merge_angle(radius, n_ways, entry)
    a_out = roundabout_depart_angle(radius, n_ways, exit)
    while a_out <= a_in + 1e-9:
        a_out += 2 * math.pi
    ring = _arc(0.0, 0.0, radius, a_in, a_out)
    entry_pts = _roundabout_entry_points(radius, n_ways, entry)
    exit_pts = _roundabout_exit_points(radius, n_ways, exit)
    return np.vstack([entry_pts, ring[1:-1], exit_pts])


def _make_roundabout(params: dict) -> MapTemplate:
    radius = float(params.get("radius", 18.0))
    n_ways = int(params.get("n_ways", 4))
    limit = float(params.get("speed_limit", 9.0))
    if not 10.0 <= radius <= 40.0:
        raise InvalidParams(f"roundabout radius {radius} outside [10, 40] m")
    if not 3 <= n_ways <= 12:
        raise InvalidParams(f"roundabout needs 3..12 ways, got {n_ways}")
    params = {"radius": radius, "n_ways": n_ways, "speed_limit": limit}
    paths: dict[str, ReferencePath] = {}
    ring = _arc(0.0, 0.0, radius, 0.0, 2 * math.pi, step_deg=1.5)
    paths["circ"] = fit_reference_path(ring, limit, path_id="circ")
    for k in range(n_ways):
        paths[f"entry{k}"] = fit_reference_path(
            _roundabout_entry_points(radius, n_ways, k, ring_ext_deg=8.0),
            limit,
            path_id=f"entry{k}",
        )
        paths[f"exit{k}"] = fit_reference_path(
            _roundabout_exit_points(radius, n_ways, k, ring_ext_deg=8.0),
            limit,
            path_id=f"exit{k}",
        )
    annotated = annotate_topology(list(paths.values()))
    return MapTemplate("roundabout", params, {p.path_id: p for p in annotated})


# ---------------------------------------------------------------------------
# T-intersection


def _fillet_right_from_north(r: float):
    # northbound on x=+LANE_OFFSET turning right (east) onto y=-LANE_OFFSET
    cx, cy = LANE_OFFSET + r, -LANE_OFFSET - r
    return _arc(cx, cy, r, math.pi, math.pi / 2, step_deg=3.0)[::-1]


def tint_paths(params: Mapping) -> dict[str, np.ndarray]:
    arm = float(params["arm_length"])
    stem = float(params["stem_length"])
    lo = LANE_OFFSET
    pts: dict[str, np.ndarray] = {}
    pts["e2w"] = np.array([(arm, lo), (-arm, lo)])
    pts["w2e"] = np.array([(-arm, -lo), (arm, -lo)])
    # stem right turn: north up x=+lo, arc onto eastbound y=-lo
    r1 = 3.5
    arc1 = _arc(lo + r1, -lo - r1, r1, math.pi, math.pi / 2, step_deg=3.0)
    pts["s2e"] = np.vstack([[(lo, -stem)], arc1, [(arm, -lo)]])
    # stem left turn: north up x=+lo, CCW arc onto westbound y=+lo
    r2 = lo + 3.5
    arc2 = _arc(lo - r2, lo - r2, r2, 0.0, math.pi / 2, step_deg=3.0)
    pts["s2w"] = np.vstack([[(lo, -stem)], arc2, [(-arm, lo)]])
    # main left turn: westbound y=+lo, CCW arc onto southbound x=-lo
    r3 = lo + 3.5
    arc3 = _arc(lo + r3 - 2 * lo, -r3 + lo, r3, math.pi / 2, math.pi, step_deg=3.0)
    pts["e2s"] = np.vstack([[(arm, lo)], arc3, [(-lo, -stem)]])
    # main right turn: eastbound y=-lo, CW arc onto southbound x=-lo
    r4 = 3.5
    arc4 = _arc(-lo - r4, -lo - r4, r4, math.pi / 2, 0.0, step_deg=3.0)
    pts["w2s"] = np.vstack([[(-arm, -lo)], arc4, [(-lo, -stem)]])
    return pts


def _make_tint(params: dict) -> MapTemplate:
    arm = float(params.get("arm_length", 70.0))
    stem = float(params.get("stem_length", 55.0))
    limit = float(params.get("speed_limit", 8.5))
    if arm < 30 or stem < 25:
        raise InvalidParams("t-intersection arms must be at least 30/25 m")
    params = {"arm_length": arm, "stem_length": stem, "speed_limit": limit}
    raw = tint_paths(params)
    paths = {
        pid: fit_reference_path(w, limit, path_id=pid) for pid, w in raw.items()
    }
    annotated = {p.path_id: p for p in annotate_topology(list(paths.values()))}
    stop_bar = (LANE_OFFSET, -7.0)
    yields = {
        "e2w": (9.0, LANE_OFFSET),
        "w2e": (-9.0, -LANE_OFFSET),
        "e2s": (9.0, LANE_OFFSET),
        "w2s": (-9.0, -LANE_OFFSET),
    }
    out: dict[str, ReferencePath] = {}
    for pid, p in annotated.items():
        specs = [
            {
                "kind": rp.kind,
                "location": rp.location,
                **({"partner_path": rp.partner_path} if rp.partner_path else {}),
                **({"light_state": rp.light_state} if rp.light_state else {}),
            }
            for rp in p.ref_points
        ]
        if pid.startswith("s2"):
            specs.append({"kind": "StopLine", "location": stop_bar})
        else:
            specs.append({"kind": "YieldLine", "location": yields[pid]})
        out[pid] = with_ref_points(p, specs)
    return MapTemplate("t-intersection", params, out)


# ---------------------------------------------------------------------------
# merge and lane change


def _make_merge(params: dict) -> MapTemplate:
    main_len = float(params.get("main_length", 120.0))
    limit = float(params.get("speed_limit", 10.0))
    if main_len < 60:
        raise InvalidParams("merge main road must be at least 60 m")
    params = {"main_length": main_len, "speed_limit": limit}
    main = fit_reference_path(
        [(-main_len, 0.0), (main_len * 0.6, 0.0)], limit, path_id="main"
    )
    ramp = fit_reference_path(
        [(-main_len * 0.75, -11.0), (-28.0, -11.0), (0.0, 0.0), (main_len * 0.6, 0.0)],
        limit,
        path_id="ramp",
    )
    annotated = annotate_topology([main, ramp])
    return MapTemplate("merge", params, {p.path_id: p for p in annotated})


def _make_lane_change(params: dict) -> MapTemplate:
    length = float(params.get("length", 150.0))
    limit = float(params.get("speed_limit", 10.0))
    if length < 60:
        raise InvalidParams("lane-change road must be at least 60 m")
    params = {"length": length, "speed_limit": limit}
    lane0 = fit_reference_path([(0.0, 0.0), (length, 0.0)], limit, path_id="lane0")
    lane1 = fit_reference_path(
        [(0.0, 2 * LANE_OFFSET), (length, 2 * LANE_OFFSET)], limit, path_id="lane1"
    )
    return MapTemplate("lane-change", params, {"lane0": lane0, "lane1": lane1})


_MAKERS = {
    "roundabout": _make_roundabout,
    "t-intersection": _make_tint,
    "merge": _make_merge,
    "lane-change": _make_lane_change,
}


def make_map(kind: str, params: Mapping | None = None, seed: int = 0) -> MapTemplate:
    """Build a template; geometry depends only on kind and params."""
    if kind not in _MAKERS:
        raise InvalidParams(f"unknown template kind {kind!r}; choose from {KINDS}")
    return _MAKERS[kind](dict(params or {}))
