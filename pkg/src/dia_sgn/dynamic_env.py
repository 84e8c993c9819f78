"""Dynamic driving environment: insertion areas over reference paths.

An insertion area (DIA) is a drivable gap bounded front and rear by road
entities: vehicles, stop lines, or the active reference point itself. All
longitudinal distances in one snapshot are measured to a single active
reference point, selected by scanning the predicted vehicle's path for the
first relevant regulatory or topological element.

Agents are *assigned* to exactly one reference path (their route) but may
*occupy* the corridor of other, locally coincident paths; gap rear bounds
come from assignment, front bounds from occupancy.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NoEgoPath, NoRelation
from .static_env import (
    DEFAULT_CORRIDOR_HALF_WIDTH,
    FrenetPose,
    LightState,
    Overlap,
    OverlapKind,
    PointKind,
    ReferencePath,
    ReferencePoint,
    TOPOLOGICAL_KINDS,
    TRAFFIC_SIGN_KINDS,
    classify_overlap,
    project_many,
    tangent_heading,
    to_cartesian,
    to_frenet,
)

# Defaults; every operation takes these as keyword overrides.
D_UO = 30.0                 # fallback active-point distance
D_TR = 5.0                  # virtual stop line offset before a sign
V_EPS = 0.1                 # zero-speed threshold
LANE_OCCUPANCY_TOL = 1.0    # lateral tol for occupying a corridor
HEADING_ALIGN_TOL = math.pi / 3
CONTAINS_TOL = 0.25         # point "lies on" a path
STAGE_POS_TOL = 0.75        # slack for "at the virtual line"
PARALLEL_WIDTH = 6.0        # max lateral offset between sibling lanes
PARALLEL_MIN_LEN = 5.0      # min stretch of sideways coincidence


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


class DiaState(enum.Enum):
    MOVING = "Moving"
    PARTIALLY_MOVING = "PartiallyMoving"
    STOPPED = "Stopped"


class SourceKind(enum.Enum):
    AGENT = "Agent"
    STOP_LINE = "StopLine"
    VIRTUAL_STOP_LINE = "VirtualStopLine"
    ACTIVE_REF_POINT = "ActiveRefPoint"
    SPEED_LIMIT_HORIZON = "SpeedLimitHorizon"


@dataclass(frozen=True)
class BoundarySource:
    kind: SourceKind
    agent_id: str | None = None

    def __post_init__(self):
        if (self.agent_id is not None) != (self.kind is SourceKind.AGENT):
            raise ValueError("agent_id is required iff the source is an agent")


@dataclass(frozen=True)
class BoundaryState:
    position: tuple[float, float]   # boundary center, global frame
    v: float                        # speed along moving direction
    a: float

    def __post_init__(self):
        if self.v < -1e-9:
            raise ValueError(f"boundary speed must be non-negative, got {self.v}")


@dataclass(frozen=True)
class DIA:
    dia_id: str
    front: BoundaryState
    rear: BoundaryState
    ref_path: str
    front_source: BoundarySource
    rear_source: BoundarySource
    # arc-length positions on ref_path, cached at extraction time
    front_s: float = 0.0
    rear_s: float = 0.0

    def __post_init__(self):
        if self.front_s < self.rear_s - 1e-9:
            raise ValueError(f"{self.dia_id}: front boundary behind rear boundary")


@dataclass(frozen=True)
class DiaFeatures:
    l: float
    theta: float
    v_f: float
    v_r: float
    a_f: float
    a_r: float
    d_lon_f: float
    d_lon_r: float
    d_lat_f: float
    d_lat_r: float


FEATURE_NAMES = (
    "l", "theta", "v_f", "v_r", "a_f", "a_r",
    "d_lon_f", "d_lon_r", "d_lat_f", "d_lat_r",
)


@dataclass(frozen=True)
class AgentState:
    agent_id: str
    path_id: str
    pose: FrenetPose    # s is the rear-bumper arc length on the assigned path
    v: float
    a: float
    length: float

    @property
    def bumper_s(self) -> float:
        """Front bumper arc length on the assigned path."""
        return self.pose.s + self.length


class RoadMap:
    """Reference path collection with cached pairwise topology queries."""

    def __init__(self, paths: Iterable[ReferencePath], _caches=None):
        self.paths: dict[str, ReferencePath] = {p.path_id: p for p in paths}
        if _caches is None:
            self._overlap: dict[tuple[str, str], Overlap | None] = {}
            self._parallel: dict[tuple[str, str], bool] = {}
            self._contains: dict[tuple[str, tuple[float, float]], float | None] = {}
        else:
            self._overlap, self._parallel, self._contains = _caches

    def path(self, path_id: str) -> ReferencePath:
        return self.paths[path_id]

    def path_ids(self) -> list[str]:
        return sorted(self.paths)

    def with_paths(self, replacements: Mapping[str, ReferencePath]) -> "RoadMap":
        """New map with some paths replaced; geometry caches are shared.

        Only valid when replacements keep the waypoint geometry (e.g. edited
        reference points).
        """
        merged = dict(self.paths)
        merged.update(replacements)
        return RoadMap(merged.values(), _caches=(self._overlap, self._parallel, self._contains))

    def overlap(self, a: str, b: str) -> Overlap | None:
        key = (a, b)
        if key not in self._overlap:
            try:
                ov = classify_overlap(self.paths[a], self.paths[b])
            except NoRelation:
                ov = None
            self._overlap[key] = ov
        return self._overlap[key]

    def insertion_parallel(self, a: str, b: str) -> bool:
        """Sibling-lane test: undecided overlap plus an aligned sideways run.

        Opposite-direction or merely nearby unrelated corridors do not count.
        """
        key = (a, b)
        if key in self._parallel:
            return self._parallel[key]
        result = False
        ov = self.overlap(a, b)
        if ov is not None and ov.kind is OverlapKind.UNDECIDED:
            pa, pb = self.paths[a], self.paths[b]
            s_proj, _, dist = project_many(pb, pa.waypoints)
            near = dist < PARALLEL_WIDTH
            if near.any():
                run_len = 0.0
                aligned = 0
                total = 0
                for i in np.flatnonzero(near):
                    if i + 1 < len(near) and near[i + 1]:
                        run_len += pa.arclen[i + 1] - pa.arclen[i]
                    seg_i = min(i, len(pa.waypoints) - 2)
                    seg = pa.waypoints[seg_i + 1] - pa.waypoints[seg_i]
                    ha = math.atan2(seg[1], seg[0])
                    hb = tangent_heading(pb, float(np.clip(s_proj[i], 0, pb.length)))
                    total += 1
                    if abs(wrap_angle(ha - hb)) < HEADING_ALIGN_TOL:
                        aligned += 1
                result = run_len >= PARALLEL_MIN_LEN and aligned > 0.8 * total
        self._parallel[key] = result
        self._parallel[(b, a)] = result if key != (b, a) else result
        return result

    def contains_point(self, path_id: str, location: tuple[float, float]) -> float | None:
        """Arc length of ``location`` on the path, or None when off it."""
        key = (path_id, (float(location[0]), float(location[1])))
        if key not in self._contains:
            p = self.paths[path_id]
            _, _, dist = project_many(p, np.asarray(location, dtype=np.float64)[None, :])
            if dist[0] < CONTAINS_TOL:
                s, _, _ = project_many(p, np.asarray(location)[None, :])
                self._contains[key] = float(s[0])
            else:
                self._contains[key] = None
        return self._contains[key]


@dataclass(frozen=True)
class SceneSnapshot:
    timestamp: float
    agents: tuple[AgentState, ...]
    maps: RoadMap
    ego_id: str
    light_states: Mapping[str, LightState] = field(default_factory=dict)

    def agent(self, agent_id: str) -> AgentState:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def effective_light(self, point: ReferencePoint) -> LightState | None:
        return self.light_states.get(point.point_id, point.light_state)


def agent_position(scene: SceneSnapshot, agent: AgentState) -> tuple[float, float]:
    """Rear-bumper location in the global frame."""
    return to_cartesian(scene.maps.path(agent.path_id), agent.pose)


def agent_heading(scene: SceneSnapshot, agent: AgentState) -> float:
    path = scene.maps.path(agent.path_id)
    s = float(np.clip(agent.pose.s + agent.length / 2, 0.0, path.length))
    return tangent_heading(path, s)


def dia_state(dia: DIA, *, v_eps: float = V_EPS) -> DiaState:
    moving_f = dia.front.v > v_eps
    moving_r = dia.rear.v > v_eps
    if moving_f and moving_r:
        return DiaState.MOVING
    if moving_f or moving_r:
        return DiaState.PARTIALLY_MOVING
    return DiaState.STOPPED


# ---------------------------------------------------------------------------
# regulatory transform (two-stage stop/yield handling)


def _next_topological_partner(path: ReferencePath, after_s: float) -> str | None:
    for rpt in path.ref_points:
        if rpt.s_on_path > after_s + 1e-9 and rpt.kind in TOPOLOGICAL_KINDS:
            return rpt.partner_path
    return None


def apply_regulatory_transform(
    scene: SceneSnapshot,
    ego: str,
    *,
    d_tr: float = D_TR,
    v_eps: float = V_EPS,
) -> SceneSnapshot:
    """Insert virtual stop lines and retire passed signs.

    For every stop sign (and every yield sign whose path is slower than the
    main path it feeds) with an approaching vehicle: while the vehicle is
    still rolling toward the virtual line at ``d_tr`` before the sign, a
    VirtualStopLine point is added there; once it has stopped at the line or
    moved past it, the sign itself is dropped so the next topological point
    downstream takes over.
    """
    replacements: dict[str, ReferencePath] = {}
    for pid in scene.maps.path_ids():
        path = scene.maps.path(pid)
        signs = [p for p in path.ref_points if p.kind in TRAFFIC_SIGN_KINDS]
        if not signs:
            continue
        assigned = sorted(
            (a for a in scene.agents if a.path_id == pid), key=lambda a: a.pose.s
        )
        removed: set[str] = set()
        added: list[ReferencePoint] = []
        for k, sign in enumerate(signs):
            if sign.kind is PointKind.YIELD_LINE:
                main = _next_topological_partner(path, sign.s_on_path)
                if main is None or main not in scene.maps.paths:
                    continue
                if path.speed_limit >= scene.maps.path(main).speed_limit:
                    continue  # no slow-down required at this yield
            s_virt = max(sign.s_on_path - d_tr, 0.0)
            approacher = None
            for a in assigned:
                if a.bumper_s < sign.s_on_path + STAGE_POS_TOL:
                    approacher = a
            if approacher is None:
                continue
            bumper = approacher.bumper_s
            stage_two = (
                bumper >= s_virt - STAGE_POS_TOL and approacher.v <= v_eps
            ) or bumper > s_virt + STAGE_POS_TOL
            if stage_two:
                removed.add(sign.point_id)
            else:
                added.append(
                    ReferencePoint(
                        point_id=f"{pid}:virt{k}",
                        kind=PointKind.VIRTUAL_STOP_LINE,
                        location=to_cartesian(path, FrenetPose(s_virt, 0.0)),
                        s_on_path=s_virt,
                    )
                )
        if removed or added:
            points = [p for p in path.ref_points if p.point_id not in removed]
            points.extend(added)
            points.sort(key=lambda p: (p.s_on_path, p.point_id))
            replacements[pid] = replace(path, ref_points=tuple(points))
    if not replacements:
        return scene
    return replace(scene, maps=scene.maps.with_paths(replacements))


# ---------------------------------------------------------------------------
# active reference point selection


def select_active_reference_point(
    scene: SceneSnapshot,
    ego: str,
    *,
    d_uo: float = D_UO,
) -> ReferencePoint:
    """First qualifying point ahead of the predicted vehicle on its path.

    Priority order along the path: any traffic sign or red light wins; a
    topological point wins when its partner path carries at least one car;
    otherwise a synthetic point ``d_uo`` ahead (clipped to the path end).
    """
    try:
        ego_agent = scene.agent(ego)
        path = scene.maps.path(ego_agent.path_id)
    except KeyError as e:
        raise NoEgoPath(f"agent {ego!r} is not placed on a known path") from e
    bumper = ego_agent.bumper_s
    for rpt in path.ref_points:
        if rpt.s_on_path <= bumper + 1e-9:
            continue
        if rpt.kind in TRAFFIC_SIGN_KINDS:
            return rpt
        if rpt.kind is PointKind.TRAFFIC_LIGHT:
            if scene.effective_light(rpt) is LightState.RED:
                return rpt
        elif rpt.kind in TOPOLOGICAL_KINDS:
            partner = rpt.partner_path
            if partner in scene.maps.paths and any(
                a.path_id == partner for a in scene.agents
            ):
                return rpt
    s = min(bumper + d_uo, path.length)
    return ReferencePoint(
        point_id=f"{path.path_id}:horizon",
        kind=PointKind.HORIZON,
        location=to_cartesian(path, FrenetPose(s, 0.0)),
        s_on_path=s,
    )


# ---------------------------------------------------------------------------
# DIA extraction


@dataclass(frozen=True)
class _Occupant:
    agent: AgentState
    s: float       # rear bumper projected on the host path
    d: float


def _occupants(scene: SceneSnapshot, path: ReferencePath,
               positions: Mapping[str, tuple[float, float]],
               headings: Mapping[str, float]) -> list[_Occupant]:
    """Agents physically inside the path corridor, heading-aligned."""
    out = []
    agents = scene.agents
    if not agents:
        return out
    pts = np.array([positions[a.agent_id] for a in agents])
    s, d, dist = project_many(path, pts)
    for i, a in enumerate(agents):
        if dist[i] > LANE_OCCUPANCY_TOL:
            continue
        if s[i] < -1e-9 or s[i] > path.length + 1e-9:
            continue
        hp = tangent_heading(path, float(np.clip(s[i], 0, path.length)))
        if abs(wrap_angle(headings[a.agent_id] - hp)) > HEADING_ALIGN_TOL:
            continue
        out.append(_Occupant(agent=a, s=float(s[i]), d=float(d[i])))
    out.sort(key=lambda o: (o.s, o.agent.agent_id))
    return out


def _terminal_boundary(path: ReferencePath, rpt_act: ReferencePoint, s_rpt: float):
    """Front boundary description when the gap runs up to the active point."""
    if rpt_act.kind in (PointKind.TRAFFIC_LIGHT, PointKind.STOP_LINE):
        src = BoundarySource(SourceKind.STOP_LINE)
        v = 0.0
    elif rpt_act.kind is PointKind.HORIZON:
        src = BoundarySource(SourceKind.SPEED_LIMIT_HORIZON)
        v = path.speed_limit
    else:
        src = BoundarySource(SourceKind.ACTIVE_REF_POINT)
        v = path.speed_limit
    s = float(np.clip(s_rpt, 0.0, path.length))
    return s_rpt, BoundaryState(to_cartesian(path, FrenetPose(s, 0.0)), v, 0.0), src


def _line_blockers(path: ReferencePath, scene: SceneSnapshot, lo: float, hi: float):
    """Stop/virtual/red-light points strictly inside (lo, hi)."""
    out = []
    for p in path.ref_points:
        if not (lo + 1e-9 < p.s_on_path < hi - 1e-9):
            continue
        if p.kind is PointKind.VIRTUAL_STOP_LINE or p.kind is PointKind.STOP_LINE:
            out.append(p)
        elif p.kind is PointKind.TRAFFIC_LIGHT and scene.effective_light(p) is LightState.RED:
            out.append(p)
    return out


def _front_element(
    path: ReferencePath,
    scene: SceneSnapshot,
    occupants: Sequence[_Occupant],
    rear_bumper: float,
    rpt_act: ReferencePoint,
    s_rpt: float,
    exclude: str,
):
    """Nearest bounding element ahead of ``rear_bumper``, up to the active point."""
    cands: list[tuple[float, BoundaryState, BoundarySource]] = []
    for occ in occupants:
        if occ.agent.agent_id == exclude:
            continue
        if occ.s >= rear_bumper - 1e-9 and occ.s < s_rpt - 1e-9:
            own = scene.maps.path(occ.agent.path_id)
            pos = to_cartesian(own, occ.agent.pose)
            cands.append(
                (
                    occ.s,
                    BoundaryState(pos, occ.agent.v, occ.agent.a),
                    BoundarySource(SourceKind.AGENT, occ.agent.agent_id),
                )
            )
            break  # occupants sorted by s: first ahead is nearest
    for p in _line_blockers(path, scene, rear_bumper, s_rpt):
        cands.append(
            (
                p.s_on_path,
                BoundaryState(p.location, 0.0, 0.0),
                BoundarySource(
                    SourceKind.VIRTUAL_STOP_LINE
                    if p.kind is PointKind.VIRTUAL_STOP_LINE
                    else SourceKind.STOP_LINE
                ),
            )
        )
    cands.append(_terminal_boundary(path, rpt_act, s_rpt))
    return min(cands, key=lambda c: c[0])


def extract_dias(
    scene: SceneSnapshot,
    ego: str,
    rpt_act: ReferencePoint,
) -> list[DIA]:
    """All insertion areas of the snapshot, measured to ``rpt_act``.

    On the predicted vehicle's path only its front gap is taken. On every
    other path that runs through the active point, one gap per assigned
    vehicle short of the point. On sibling (lane-change) paths, only gaps
    between consecutive assigned vehicles. Ordering is deterministic:
    sorted by (path id, rear arc length).
    """
    try:
        ego_agent = scene.agent(ego)
        ego_path = scene.maps.path(ego_agent.path_id)
    except KeyError as e:
        raise NoEgoPath(f"agent {ego!r} is not placed on a known path") from e

    positions = {a.agent_id: agent_position(scene, a) for a in scene.agents}
    headings = {a.agent_id: agent_heading(scene, a) for a in scene.agents}

    modes: dict[str, str] = {ego_path.path_id: "ego"}
    for pid in scene.maps.path_ids():
        if pid == ego_path.path_id:
            continue
        if scene.maps.contains_point(pid, rpt_act.location) is not None:
            modes[pid] = "through"
        elif scene.maps.insertion_parallel(ego_path.path_id, pid):
            modes[pid] = "parallel"

    dias: list[DIA] = []
    for pid in sorted(modes):
        mode = modes[pid]
        path = scene.maps.path(pid)
        if pid == ego_path.path_id:
            # the active point is always selected (or synthesized) on ego's path
            s_rpt = rpt_act.s_on_path
        else:
            s_rpt = scene.maps.contains_point(pid, rpt_act.location)
            if s_rpt is None:
                s_on, _, _ = project_many(path, np.asarray(rpt_act.location)[None, :])
                s_rpt = float(s_on[0])
        occupants = _occupants(scene, path, positions, headings)

        if mode == "ego":
            rear_bumper = min(ego_agent.bumper_s, path.length)
            s_f, front, front_src = _front_element(
                path, scene, occupants, rear_bumper, rpt_act, s_rpt, exclude=ego
            )
            if s_f < rear_bumper:  # already at/past the bounding element: empty gap
                s_f = rear_bumper
                front = BoundaryState(
                    to_cartesian(path, FrenetPose(float(np.clip(s_f, 0, path.length)), 0.0)),
                    front.v,
                    front.a,
                )
            rear_pos = to_cartesian(
                path, FrenetPose(float(np.clip(rear_bumper, 0, path.length)), ego_agent.pose.d)
            )
            dias.append(
                DIA(
                    dia_id=f"{pid}:{ego}",
                    front=front,
                    rear=BoundaryState(rear_pos, ego_agent.v, ego_agent.a),
                    ref_path=pid,
                    front_source=front_src,
                    rear_source=BoundarySource(SourceKind.AGENT, ego),
                    front_s=s_f,
                    rear_s=rear_bumper,
                )
            )
            continue

        assigned = sorted(
            (a for a in scene.agents if a.path_id == pid and a.agent_id != ego),
            key=lambda a: a.pose.s,
        )
        for idx, a in enumerate(assigned):
            if a.pose.s >= s_rpt - 1e-9:
                continue
            rear_bumper = a.bumper_s
            if mode == "parallel":
                nxt = None
                for occ in occupants:
                    if occ.agent.agent_id != a.agent_id and occ.s >= rear_bumper - 1e-9:
                        nxt = occ
                        break
                if nxt is None:
                    continue  # sibling lanes: no terminal gap toward the point
                own = scene.maps.path(nxt.agent.path_id)
                s_f = nxt.s
                front = BoundaryState(to_cartesian(own, nxt.agent.pose), nxt.agent.v, nxt.agent.a)
                front_src = BoundarySource(SourceKind.AGENT, nxt.agent.agent_id)
            else:
                s_f, front, front_src = _front_element(
                    path, scene, occupants, rear_bumper, rpt_act, s_rpt, exclude=a.agent_id
                )
            if s_f < rear_bumper - 1e-9:
                continue
            rear_pos = to_cartesian(
                path, FrenetPose(float(np.clip(rear_bumper, 0, path.length)), a.pose.d)
            )
            dias.append(
                DIA(
                    dia_id=f"{pid}:{a.agent_id}",
                    front=front,
                    rear=BoundaryState(rear_pos, a.v, a.a),
                    ref_path=pid,
                    front_source=front_src,
                    rear_source=BoundarySource(SourceKind.AGENT, a.agent_id),
                    front_s=max(s_f, rear_bumper),
                    rear_s=rear_bumper,
                )
            )

    dias.sort(key=lambda d: (d.ref_path, d.rear_s, d.dia_id))
    return dias


def dia_features(
    dia: DIA,
    rpt_act: ReferencePoint,
    paths: Mapping[str, ReferencePath] | RoadMap,
    *,
    w_max: float = DEFAULT_CORRIDOR_HALF_WIDTH,
) -> DiaFeatures:
    """Scalar description of one insertion area.

    Longitudinal distances are measured along the area's own path, positive
    while the boundary has not yet reached the active point. The orientation
    is the path tangent at the area's center, in the global frame.
    """
    path = paths.path(dia.ref_path) if isinstance(paths, RoadMap) else paths[dia.ref_path]
    fr = to_frenet(path, dia.front.position, w_max=w_max)
    re = to_frenet(path, dia.rear.position, w_max=w_max)
    s_rpt = to_frenet(path, rpt_act.location, w_max=w_max).s
    d_lon_f = s_rpt - fr.s
    d_lon_r = s_rpt - re.s
    center = float(np.clip(0.5 * (fr.s + re.s), 0.0, path.length))
    return DiaFeatures(
        l=abs(d_lon_f - d_lon_r),
        theta=tangent_heading(path, center),
        v_f=dia.front.v,
        v_r=dia.rear.v,
        a_f=dia.front.a,
        a_r=dia.rear.a,
        d_lon_f=d_lon_f,
        d_lon_r=d_lon_r,
        d_lat_f=fr.d,
        d_lat_r=re.d,
    )
