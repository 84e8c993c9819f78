"""Static driving environment: reference paths, reference points, and
Frenet-frame geometry.

Conventions
-----------
* Paths are piecewise-linear polylines densified to at most 0.5 m spacing;
  arc length is exact for the stored polyline.
* Frenet ``s`` is arc length from the path start, ``d`` is the signed
  lateral offset, positive to the left of the travel direction.
* Nearest-projection ties are broken toward the smallest ``s``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegeneratePath,
    InvalidReferencePoint,
    NoRelation,
    OffCorridor,
    OutOfRange,
)

DEFAULT_RESAMPLE_STEP = 0.5
DEFAULT_CORRIDOR_HALF_WIDTH = 15.0   # W_max: projection domain bound
REF_POINT_SNAP_TOL = 0.1             # max |d| for a point annotated on a path
COINCIDE_TOL = 0.25                  # lateral tol for "same corridor"
MIN_MERGE_LEN = 3.0                  # min coincident stretch for a merge
_EPS = 1e-9


class PointKind(enum.Enum):
    POINT_OVERLAP = "PointOverlap"
    LINE_OVERLAP = "LineOverlap"
    STOP_LINE = "StopLine"
    TRAFFIC_LIGHT = "TrafficLight"
    YIELD_LINE = "YieldLine"
    # Synthesized at runtime, never part of a stored map:
    VIRTUAL_STOP_LINE = "VirtualStopLine"
    HORIZON = "Horizon"


TOPOLOGICAL_KINDS = frozenset({PointKind.POINT_OVERLAP, PointKind.LINE_OVERLAP})
REGULATORY_KINDS = frozenset(
    {PointKind.STOP_LINE, PointKind.TRAFFIC_LIGHT, PointKind.YIELD_LINE}
)
TRAFFIC_SIGN_KINDS = frozenset({PointKind.STOP_LINE, PointKind.YIELD_LINE})


class LightState(enum.Enum):
    RED = "Red"
    YELLOW = "Yellow"
    GREEN = "Green"


class OverlapKind(enum.Enum):
    POINT = "PointOverlap"
    LINE = "LineOverlap"
    UNDECIDED = "UndecidedOverlap"


@dataclass(frozen=True)
class Overlap:
    kind: OverlapKind
    point: tuple[float, float] | None  # crossing / merge-start; None for undecided


@dataclass(frozen=True)
class ReferencePoint:
    point_id: str
    kind: PointKind
    location: tuple[float, float]
    s_on_path: float
    partner_path: str | None = None
    light_state: LightState | None = None

    def __post_init__(self):
        if self.kind in TOPOLOGICAL_KINDS:
            if self.partner_path is None:
                raise InvalidReferencePoint(
                    f"{self.point_id}: topological kind {self.kind.value} needs a partner path"
                )
        elif self.partner_path is not None:
            raise InvalidReferencePoint(
                f"{self.point_id}: {self.kind.value} must not carry a partner path"
            )
        if (self.light_state is not None) != (self.kind is PointKind.TRAFFIC_LIGHT):
            raise InvalidReferencePoint(
                f"{self.point_id}: light_state is required iff kind is TrafficLight"
            )


@dataclass(frozen=True)
class FrenetPose:
    s: float
    d: float


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """Arc-length parameterized polyline with annotated reference points."""

    path_id: str
    waypoints: np.ndarray          # (N, 2) float64
    arclen: np.ndarray             # (N,) cumulative arc length, arclen[0] == 0
    speed_limit: float
    ref_points: tuple[ReferencePoint, ...] = ()

    @property
    def length(self) -> float:
        return float(self.arclen[-1])

    def point_by_id(self, point_id: str) -> ReferencePoint:
        for p in self.ref_points:
            if p.point_id == point_id:
                return p
        raise KeyError(point_id)


def _dedupe(points: np.ndarray) -> np.ndarray:
    """Drop consecutive waypoints closer than 1e-9 m."""
    keep = [0]
    for i in range(1, len(points)):
        if np.hypot(*(points[i] - points[keep[-1]])) > _EPS:
            keep.append(i)
    return points[keep]


def chaikin_smooth(points: np.ndarray, iterations: int) -> np.ndarray:
    """Chaikin corner cutting; endpoints are preserved."""
    pts = points
    for _ in range(iterations):
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        mid = np.empty((2 * len(pts) - 2, 2))
        mid[0::2] = q
        mid[1::2] = r
        pts = np.vstack([pts[:1], mid, pts[-1:]])
    return pts


def _resample(points: np.ndarray, step: float) -> np.ndarray:
    """Insert collinear points so every segment is at most ``step`` long.

    Polyline arc length is preserved up to float rounding.
    """
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        seg = float(np.hypot(*(b - a)))
        n = max(1, math.ceil(seg / step - 1e-12))
        for i in range(1, n + 1):
            out.append(a + (b - a) * (i / n))
    return np.asarray(out, dtype=np.float64)


def fit_reference_path(
    waypoints: Sequence[Sequence[float]],
    speed_limit: float,
    *,
    path_id: str = "path",
    resample_step: float = DEFAULT_RESAMPLE_STEP,
    smooth_iterations: int = 0,
) -> ReferencePath:
    """Build a reference path from raw waypoints.

    Consecutive duplicate waypoints are dropped; fewer than two distinct
    waypoints raise :class:`DegeneratePath`. Optional Chaikin smoothing runs
    before densification (it alters arc length and is off by default).
    """
    pts = np.asarray(waypoints, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegeneratePath(f"{path_id}: waypoints must be an (N, 2) sequence")
    pts = _dedupe(pts)
    if len(pts) < 2:
        raise DegeneratePath(f"{path_id}: needs at least 2 distinct waypoints")
    if smooth_iterations > 0:
        pts = chaikin_smooth(pts, smooth_iterations)
        pts = _dedupe(pts)
    pts = _resample(pts, resample_step)
    seg = np.hypot(*(pts[1:] - pts[:-1]).T)
    arclen = np.concatenate([[0.0], np.cumsum(seg)])
    pts.flags.writeable = False
    arclen.flags.writeable = False
    return ReferencePath(path_id=path_id, waypoints=pts, arclen=arclen, speed_limit=float(speed_limit))


def project_many(path: ReferencePath, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points (M, 2) onto the path.

    Returns ``(s, d, dist)`` arrays; ``dist`` is the unsigned distance and
    ``d`` carries the left-positive sign. Ties go to the smallest ``s``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = path.waypoints[:-1]                      # (S, 2)
    dseg = path.waypoints[1:] - a                # (S, 2)
    L2 = np.einsum("ij,ij->i", dseg, dseg)       # (S,)
    rel = pts[:, None, :] - a[None, :, :]        # (M, S, 2)
    t = np.einsum("msj,sj->ms", rel, dseg) / L2
    t = np.clip(t, 0.0, 1.0)
    foot = a[None] + t[..., None] * dseg[None]
    diff = pts[:, None, :] - foot
    dist2 = np.einsum("msj,msj->ms", diff, diff)
    s_all = path.arclen[:-1][None, :] + t * np.sqrt(L2)[None, :]

    best = dist2.min(axis=1, keepdims=True)
    # among near-minimal segments prefer the smallest s (deterministic)
    cand = dist2 <= best + 1e-12
    s_masked = np.where(cand, s_all, np.inf)
    idx = s_masked.argmin(axis=1)
    m = np.arange(len(pts))
    f = foot[m, idx]
    cross = dseg[idx, 0] * (pts[:, 1] - f[:, 1]) - dseg[idx, 1] * (pts[:, 0] - f[:, 0])
    dist = np.sqrt(dist2[m, idx])
    d = np.where(cross >= 0.0, dist, -dist)
    return s_all[m, idx], d, dist


def to_frenet(
    path: ReferencePath,
    point: Sequence[float],
    *,
    w_max: float = DEFAULT_CORRIDOR_HALF_WIDTH,
) -> FrenetPose:
    """Convert a Cartesian point to path coordinates.

    Raises :class:`OffCorridor` when the nearest distance exceeds ``w_max``.
    """
    s, d, dist = project_many(path, np.asarray(point, dtype=np.float64)[None, :])
    if dist[0] > w_max:
        raise OffCorridor(
            f"point {tuple(point)} is {dist[0]:.2f} m from path {path.path_id!r} (limit {w_max})"
        )
    return FrenetPose(s=float(s[0]), d=float(d[0]))


def _segment_index(path: ReferencePath, s: float) -> int:
    if s < -1e-9 or s > path.length + 1e-9:
        raise OutOfRange(f"s={s} outside [0, {path.length}] on path {path.path_id!r}")
    idx = int(np.searchsorted(path.arclen, s, side="right")) - 1
    return min(max(idx, 0), len(path.waypoints) - 2)


def to_cartesian(path: ReferencePath, pose: FrenetPose | tuple[float, float]) -> tuple[float, float]:
    """Inverse Frenet map; exact within each linear segment."""
    s, d = (pose.s, pose.d) if isinstance(pose, FrenetPose) else pose
    idx = _segment_index(path, s)
    a = path.waypoints[idx]
    seg = path.waypoints[idx + 1] - a
    ln = float(np.hypot(*seg))
    u = seg / ln
    n = np.array([-u[1], u[0]])
    p = a + u * (s - path.arclen[idx]) + n * d
    return (float(p[0]), float(p[1]))


def tangent_heading(path: ReferencePath, s: float) -> float:
    """Heading of the travel direction at arc length ``s``, in (-pi, pi]."""
    idx = _segment_index(path, s)
    seg = path.waypoints[idx + 1] - path.waypoints[idx]
    h = math.atan2(seg[1], seg[0])
    if h <= -math.pi:
        h = math.pi
    return h


# ---------------------------------------------------------------------------
# reference point annotation


def with_ref_points(path: ReferencePath, specs: Iterable[Mapping]) -> ReferencePath:
    """Attach reference points to a path.

    Each spec is a mapping with ``kind`` and ``location`` plus optional
    ``partner_path`` / ``light_state``. Locations are projected onto the
    path; anything farther than 0.1 m laterally is rejected. Point ids are
    assigned in arc-length order: ``"<path_id>:rp<i>"``.
    """
    staged = []
    for spec in specs:
        kind = spec["kind"] if isinstance(spec["kind"], PointKind) else PointKind(spec["kind"])
        loc = tuple(float(v) for v in spec["location"])
        pose = to_frenet(path, loc)
        if abs(pose.d) >= REF_POINT_SNAP_TOL:
            raise InvalidReferencePoint(
                f"point {loc} lies {pose.d:+.3f} m off path {path.path_id!r}"
            )
        light = spec.get("light_state")
        if light is not None and not isinstance(light, LightState):
            light = LightState(light)
        staged.append((pose.s, kind, loc, spec.get("partner_path"), light))
    staged.sort(key=lambda it: (it[0], it[1].value, it[2]))
    points = tuple(
        ReferencePoint(
            point_id=f"{path.path_id}:rp{i}",
            kind=kind,
            location=loc,
            s_on_path=s,
            partner_path=partner,
            light_state=light,
        )
        for i, (s, kind, loc, partner, light) in enumerate(staged)
    )
    return replace(path, ref_points=points)


# ---------------------------------------------------------------------------
# topological overlap classification


def _coincide_runs(mask: np.ndarray, arclen: np.ndarray, min_len: float) -> list[tuple[int, int]]:
    """Index ranges [i, j] of True runs spanning at least ``min_len`` meters."""
    runs = []
    i = None
    for k, v in enumerate(mask):
        if v and i is None:
            i = k
        elif not v and i is not None:
            runs.append((i, k - 1))
            i = None
    if i is not None:
        runs.append((i, len(mask) - 1))
    return [(i, j) for i, j in runs if arclen[j] - arclen[i] >= min_len]


def _first_crossing(a: ReferencePath, b: ReferencePath) -> tuple[float, float] | None:
    """Earliest (by a's arc length) proper intersection of the two polylines."""
    pa, pb = a.waypoints, b.waypoints
    p = pa[:-1][:, None, :]
    r = (pa[1:] - pa[:-1])[:, None, :]
    q = pb[:-1][None, :, :]
    s = (pb[1:] - pb[:-1])[None, :, :]
    rxs = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    qpxr = qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]
    qpxs = qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(rxs) > 1e-15, qpxs / rxs, np.nan)
        u = np.where(np.abs(rxs) > 1e-15, qpxr / rxs, np.nan)
    hit = (t >= -1e-12) & (t <= 1 + 1e-12) & (u >= -1e-12) & (u <= 1 + 1e-12)
    if not hit.any():
        return None
    # earliest by a-segment, then by b-segment
    pairs = np.argwhere(hit)
    ia, ib = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))][0]
    pt = pa[ia] + t[ia, ib] * (pa[ia + 1] - pa[ia])
    return (float(pt[0]), float(pt[1]))


def classify_overlap(
    a: ReferencePath,
    b: ReferencePath,
    *,
    w_max: float = DEFAULT_CORRIDOR_HALF_WIDTH,
    coincide_tol: float = COINCIDE_TOL,
    min_merge_len: float = MIN_MERGE_LEN,
) -> Overlap:
    """Classify the topological relation between two paths.

    A coincident stretch of at least ``min_merge_len`` meters means the
    paths merge (line-overlap; the returned point is where the coincidence
    begins, or ends when the paths start out coincident and diverge). A
    transversal polyline crossing is a point-overlap. Anything else that
    comes within ``w_max`` is undecided; paths farther apart everywhere
    raise :class:`NoRelation`.
    """
    _, _, dist_ab = project_many(b, a.waypoints)
    _, _, dist_ba = project_many(a, b.waypoints)
    if min(dist_ab.min(), dist_ba.min()) > w_max:
        raise NoRelation(f"paths {a.path_id!r} and {b.path_id!r} never come within {w_max} m")

    for src, dists in ((a, dist_ab), (b, dist_ba)):
        runs = _coincide_runs(dists < coincide_tol, src.arclen, min_merge_len)
        if runs:
            i, j = runs[0]
            if i == 0:  # coincident from the start: report the divergence point
                pt = src.waypoints[j]
            else:
                pt = src.waypoints[i]
            return Overlap(OverlapKind.LINE, (float(pt[0]), float(pt[1])))

    crossing = _first_crossing(a, b)
    if crossing is not None:
        return Overlap(OverlapKind.POINT, crossing)
    return Overlap(OverlapKind.UNDECIDED, None)


def annotate_topology(
    paths: Sequence[ReferencePath],
    *,
    w_max: float = DEFAULT_CORRIDOR_HALF_WIDTH,
) -> list[ReferencePath]:
    """Attach crossing/merge reference points for every related path pair.

    Existing reference points are preserved; undecided pairs contribute no
    fixed point. Each path receives the point expressed in its own frame.
    """
    specs: dict[str, list[dict]] = {}
    for p in paths:
        specs[p.path_id] = [
            {
                "kind": rp.kind,
                "location": rp.location,
                "partner_path": rp.partner_path,
                "light_state": rp.light_state,
            }
            for rp in p.ref_points
        ]
        # strip Nones so with_ref_points validation stays strict
        for s in specs[p.path_id]:
            if s["partner_path"] is None:
                del s["partner_path"]
            if s["light_state"] is None:
                del s["light_state"]
    for a in paths:
        for b in paths:
            if a.path_id == b.path_id:
                continue
            try:
                ov = classify_overlap(a, b, w_max=w_max)
            except NoRelation:
                continue
            if ov.kind is OverlapKind.UNDECIDED:
                continue
            kind = (
                PointKind.POINT_OVERLAP
                if ov.kind is OverlapKind.POINT
                else PointKind.LINE_OVERLAP
            )
            specs[a.path_id].append(
                {"kind": kind, "location": ov.point, "partner_path": b.path_id}
            )
    return [with_ref_points(replace(p, ref_points=()), specs[p.path_id]) for p in paths]


# ---------------------------------------------------------------------------
# scene JSON


def dump_scene(paths: Iterable[ReferencePath]) -> dict:
    """Serialize paths to the documented scene JSON structure."""
    out = []
    for p in paths:
        entry: dict = {
            "id": p.path_id,
            "waypoints": [[float(x), float(y)] for x, y in p.waypoints],
            "speed_limit": float(p.speed_limit),
            "ref_points": [],
        }
        for rp in p.ref_points:
            rec: dict = {"kind": rp.kind.value, "location": [rp.location[0], rp.location[1]]}
            if rp.partner_path is not None:
                rec["partner_path"] = rp.partner_path
            if rp.light_state is not None:
                rec["light_state"] = rp.light_state.value
            entry["ref_points"].append(rec)
        out.append(entry)
    return {"paths": out}


def load_scene(data: dict | str) -> dict[str, ReferencePath]:
    """Load paths from scene JSON (dict or JSON text)."""
    if isinstance(data, str):
        data = json.loads(data)
    paths: dict[str, ReferencePath] = {}
    for entry in data["paths"]:
        path = fit_reference_path(
            entry["waypoints"], entry["speed_limit"], path_id=entry["id"]
        )
        path = with_ref_points(path, entry.get("ref_points", ()))
        paths[path.path_id] = path
    return paths


def scene_to_json(paths: Iterable[ReferencePath]) -> str:
    return json.dumps(dump_scene(paths), sort_keys=True)
