"""Scripted traffic episodes over the synthetic map templates.

Longitudinal control is intelligent-driver style car following along each
agent's route; interaction happens through gap acceptance at conflict
points (ring merges, stop-controlled junction crossings, lane changes).
Policies are jittered per agent at spawn time and deterministic afterward,
so the episode outcome is a function of the initial configuration.

Episodes run at 10 Hz. Agent ``s`` is the rear bumper arc length on the
assigned route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .dynamic_env import (
    AgentState,
    RoadMap,
    SceneSnapshot,
    wrap_angle,
)
from .errors import NoInsertion, SpawnFailure
from .semantic_graph import SemanticGraph2D, build_2dsg
from .sim_maps import (
    LANE_OFFSET,
    MapTemplate,
    roundabout_merge_angle,
    roundabout_route_waypoints,
)
from .static_env import (
    FrenetPose,
    PointKind,
    ReferencePath,
    annotate_topology,
    fit_reference_path,
    project_many,
    to_cartesian,
    tangent_heading,
)

DT = 0.1
LANE_HALF = LANE_OFFSET          # lateral gate for physically entering a gap
CONFLICT_CLEAR_BEHIND = 3.0      # meters past the point before it counts as clear
CONFLICT_CLEAR_AHEAD = 4.0
HOLD_MARGIN = 2.5                # stop this far before an uncommitted conflict
VEHICLE_LENGTH = 4.2


@dataclass(frozen=True)
class DriverPolicy:
    desired_speed: float = 8.0
    time_headway: float = 1.2
    min_gap: float = 2.0
    max_accel: float = 2.0
    max_decel: float = 3.0
    gap_threshold: float = 4.0   # minimum accepted time-to-conflict, seconds

    def __post_init__(self):
        if self.min_gap <= 0:
            raise ValueError("min_gap must be positive")
        if self.max_decel <= 0:
            raise ValueError("max_decel must be positive")


def jitter_policy(base: DriverPolicy, rng: np.random.Generator) -> DriverPolicy:
    """Spawn-time diversity: speed/headway/threshold within +-15%."""
    f = lambda: float(rng.uniform(0.85, 1.15))
    return replace(
        base,
        desired_speed=base.desired_speed * f(),
        time_headway=base.time_headway * f(),
        gap_threshold=base.gap_threshold * f(),
    )


@dataclass
class _SimAgent:
    agent_id: str
    route: ReferencePath
    s: float
    v: float
    policy: DriverPolicy
    length: float = VEHICLE_LENGTH
    a: float = 0.0
    d: float = 0.0
    committed: bool = True          # False for agents holding at a conflict
    must_stop: bool = False         # stop-sign discipline before acceptance
    stopped_once: bool = False
    conflict_s: float | None = None
    stop_s: float | None = None     # stop line position on the route
    lane_change_started: float | None = None
    lane_target_d: float = 0.0


@dataclass(frozen=True)
class FrameLabel:
    dia_id: str
    y: np.ndarray   # [y_s1, y_s2, y_t]


@dataclass(frozen=True, eq=False)
class Episode:
    snapshots: tuple[SceneSnapshot, ...]
    ego_id: str
    labels: tuple[FrameLabel | None, ...] = ()
    insertion_time: float | None = None
    inserted_dia: str | None = None

    @property
    def maps(self) -> RoadMap:
        return self.snapshots[0].maps


# ---------------------------------------------------------------------------
# longitudinal control


def _idm_accel(policy: DriverPolicy, v: float, gap: float, dv: float) -> float:
    free = 1.0 - (v / max(policy.desired_speed, 0.1)) ** 4
    star = policy.min_gap + v * policy.time_headway + v * dv / (
        2.0 * math.sqrt(policy.max_accel * policy.max_decel)
    )
    star = max(star, policy.min_gap)
    inter = (star / max(gap, 0.3)) ** 2
    return float(np.clip(policy.max_accel * (free - inter), -8.0, policy.max_accel))


def _occupant_gaps(agents: Sequence[_SimAgent], me: _SimAgent) -> tuple[float, float] | None:
    """Nearest leader in my corridor: (gap, leader speed)."""
    best = None
    my_bumper = me.s + me.length
    pts = []
    others = [a for a in agents if a.agent_id != me.agent_id]
    if not others:
        return None
    pos = np.array([to_cartesian(a.route, FrenetPose(a.s, a.d)) for a in others])
    s_proj, d_proj, dist = project_many(me.route, pos)
    for k, other in enumerate(others):
        if abs(d_proj[k] - me.d) > 1.2 or s_proj[k] < my_bumper - 0.5 or s_proj[k] > me.route.length:
            continue
        h_other = tangent_heading(
            other.route, float(np.clip(other.s + other.length / 2, 0, other.route.length))
        )
        h_here = tangent_heading(me.route, float(np.clip(s_proj[k], 0, me.route.length)))
        if abs(wrap_angle(h_other - h_here)) > math.pi / 3:
            continue
        gap = s_proj[k] - my_bumper
        if best is None or gap < best[0]:
            best = (float(gap), other.v)
    return best


def _conflict_blocked(agents: Sequence[_SimAgent], me: _SimAgent, conflict_xy) -> bool:
    """Someone with priority arrives at (or sits in) the conflict too soon."""
    for other in agents:
        if other.agent_id == me.agent_id or not other.committed:
            continue
        s_on, _, dist = project_many(other.route, np.asarray(conflict_xy)[None, :])
        if dist[0] > 1.2:
            continue
        d_to = float(s_on[0]) - (other.s + other.length)
        if -(other.length + CONFLICT_CLEAR_BEHIND) < d_to < CONFLICT_CLEAR_AHEAD:
            return True   # occupying the conflict zone
        if d_to >= CONFLICT_CLEAR_AHEAD:
            t_arrive = d_to / max(other.v, 0.5)
            if t_arrive < me.policy.gap_threshold:
                return True
    return False


def _step_agent(agents: Sequence[_SimAgent], me: _SimAgent, t: float) -> None:
    accel = _idm_accel(me.policy, me.v, 1e9, 0.0)
    lead = _occupant_gaps(agents, me)
    if lead is not None:
        accel = min(accel, _idm_accel(me.policy, me.v, lead[0], me.v - lead[1]))
    hold_at = None
    if me.must_stop and not me.stopped_once and me.stop_s is not None:
        hold_at = me.stop_s
    elif not me.committed and me.conflict_s is not None:
        hold_at = me.conflict_s - HOLD_MARGIN
    if hold_at is not None:
        gap = hold_at - (me.s + me.length)
        accel = min(accel, _idm_accel(me.policy, me.v, gap, me.v))
    me.a = accel
    me.v = max(0.0, me.v + accel * DT)
    me.s = min(me.s + me.v * DT, me.route.length)


def _update_commitments(agents: Sequence[_SimAgent], conflict_xy_by_id: Mapping[str, tuple], t: float) -> None:
    for me in agents:
        if me.committed:
            continue
        bumper = me.s + me.length
        if me.must_stop and not me.stopped_once:
            if me.stop_s is not None and me.v < 0.05 and bumper > me.stop_s - 6.0:
                me.stopped_once = True
            else:
                continue
        if not _conflict_blocked(agents, me, conflict_xy_by_id[me.agent_id]):
            me.committed = True


def _lane_change_lateral(me: _SimAgent, t: float) -> None:
    if me.lane_change_started is None:
        return
    u = np.clip((t - me.lane_change_started) / 2.5, 0.0, 1.0)
    me.d = me.lane_target_d * (3 * u**2 - 2 * u**3)   # smoothstep


def _snapshot(agents: Sequence[_SimAgent], roadmap: RoadMap, ego: str, t: float) -> SceneSnapshot:
    states = tuple(
        AgentState(
            agent_id=a.agent_id,
            path_id=a.route.path_id,
            pose=FrenetPose(a.s, a.d),
            v=a.v,
            a=a.a,
            length=a.length,
        )
        for a in agents
    )
    return SceneSnapshot(timestamp=t, agents=states, maps=roadmap, ego_id=ego)


def _check_spawn_spacing(agents: Sequence[_SimAgent]) -> None:
    for me in agents:
        lead = _occupant_gaps(agents, me)
        if lead is not None and lead[0] < me.policy.min_gap * 0.5:
            raise SpawnFailure(
                f"agent {me.agent_id} spawned {lead[0]:.2f} m behind its leader"
            )


# ---------------------------------------------------------------------------
# scenario construction


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything simulate_episode needs: the shared map and the spawns."""

    roadmap: RoadMap
    agents: list[_SimAgent]
    ego_id: str
    end_condition: Callable[[_SimAgent, float], bool]
    conflicts: dict = field(default_factory=dict)   # agent id -> conflict point


def _route_from_waypoints(route_id: str, waypoints, limit: float) -> ReferencePath:
    return fit_reference_path(waypoints, limit, path_id=route_id)


def roundabout_route_set(template: MapTemplate) -> dict[str, ReferencePath]:
    """Routes used by roundabout gap-acceptance episodes, annotated once.

    The predicted vehicle enters at way 0; circulating traffic enters at
    the opposite way, so it has half the ring as lead-in to the merge.
    """
    p = template.params
    limit = p["speed_limit"]
    n = p["n_ways"]
    ego_route = _route_from_waypoints(
        "r0x2", roundabout_route_waypoints(p, 0, 2 % n), limit
    )
    circ = _route_from_waypoints(
        "ring_in", roundabout_route_waypoints(p, n // 2, 1), limit
    )
    return {r.path_id: r for r in annotate_topology([ego_route, circ])}


def tint_route_set(template: MapTemplate) -> dict[str, ReferencePath]:
    """Stop-controlled right turn from the stem beside eastbound traffic."""
    return dict(template.paths)


def _scene_roundabout(template: MapTemplate, routes: Mapping[str, ReferencePath],
                      n_agents: int, base: DriverPolicy, rng: np.random.Generator) -> Scenario:
    p = template.params
    radius, n = p["radius"], p["n_ways"]
    merge_angle = roundabout_merge_angle(radius, n, 0)
    merge_xy = (radius * math.cos(merge_angle), radius * math.sin(merge_angle))
    ego_route = routes["r0x2"]
    s_conf, _, _ = project_many(ego_route, np.asarray(merge_xy)[None, :])
    ego_policy = replace(jitter_policy(base, rng), gap_threshold=rng.uniform(2.2, 5.5))
    ego = _SimAgent(
        agent_id="ego",
        route=ego_route,
        s=float(s_conf[0]) - rng.uniform(18.0, 36.0),
        v=rng.uniform(4.5, 8.0),
        policy=ego_policy,
        committed=False,
        conflict_s=float(s_conf[0]),
    )
    agents = [ego]
    conflicts = {"ego": merge_xy}
    # circulating traffic approaching the merge, nearest first
    circ = routes["ring_in"]
    s_merge_circ, _, dist_c = project_many(circ, np.asarray(merge_xy)[None, :])
    if dist_c[0] > 1.0:
        raise SpawnFailure("merge point off the circulating route")
    upstream = rng.uniform(8.0, 42.0)
    for k in range(max(0, n_agents - 1)):
        s_spawn = float(s_merge_circ[0]) - upstream - VEHICLE_LENGTH
        if s_spawn < 2.0:
            raise SpawnFailure(f"circulating car {k + 1} does not fit upstream")
        agents.append(
            _SimAgent(
                agent_id=f"c{k + 1}",
                route=circ,
                s=s_spawn,
                v=rng.uniform(5.0, 8.5),
                policy=jitter_policy(base, rng),
            )
        )
        upstream += rng.uniform(7.0, 26.0)
    end_s = float(s_conf[0]) + 6.0

    def done(ego_agent: _SimAgent, t: float) -> bool:
        return ego_agent.s + ego_agent.length > end_s

    roadmap = RoadMap(routes.values())
    return Scenario(
        roadmap=roadmap, agents=agents, ego_id="ego", end_condition=done, conflicts=conflicts
    )


def _scene_tint(template: MapTemplate, routes: Mapping[str, ReferencePath],
                n_agents: int, base: DriverPolicy, rng: np.random.Generator) -> Scenario:
    ego_route = routes["s2e"]
    stop_pt = next(p for p in ego_route.ref_points if p.kind is PointKind.STOP_LINE)
    merge_pt = next(
        p
        for p in ego_route.ref_points
        if p.kind is PointKind.LINE_OVERLAP and p.partner_path == "w2e"
    )
    ego_policy = replace(jitter_policy(base, rng), gap_threshold=rng.uniform(2.2, 5.5))
    ego = _SimAgent(
        agent_id="ego",
        route=ego_route,
        s=stop_pt.s_on_path - rng.uniform(16.0, 30.0),
        v=rng.uniform(4.0, 7.0),
        policy=ego_policy,
        committed=False,
        must_stop=True,
        stop_s=stop_pt.s_on_path,
        conflict_s=merge_pt.s_on_path,
    )
    agents = [ego]
    conflicts = {"ego": merge_pt.location}
    main = routes["w2e"]
    s_merge_main, _, _ = project_many(main, np.asarray(merge_pt.location)[None, :])
    upstream = rng.uniform(14.0, 48.0)
    for k in range(max(0, n_agents - 1)):
        agents.append(
            _SimAgent(
                agent_id=f"m{k + 1}",
                route=main,
                s=float(s_merge_main[0]) - upstream - VEHICLE_LENGTH,
                v=rng.uniform(5.0, 8.0),
                policy=jitter_policy(base, rng),
            )
        )
        upstream += rng.uniform(8.0, 28.0)
    end_s = merge_pt.s_on_path + 6.0

    def done(ego_agent: _SimAgent, t: float) -> bool:
        return ego_agent.s + ego_agent.length > end_s

    return Scenario(
        roadmap=RoadMap(routes.values()), agents=agents, ego_id="ego",
        end_condition=done, conflicts=conflicts,
    )


def _scene_merge(template: MapTemplate, routes: Mapping[str, ReferencePath],
                 n_agents: int, base: DriverPolicy, rng: np.random.Generator) -> Scenario:
    ramp = routes["ramp"]
    merge_pt = next(p for p in ramp.ref_points if p.kind is PointKind.LINE_OVERLAP)
    ego = _SimAgent(
        agent_id="ego",
        route=ramp,
        s=merge_pt.s_on_path - rng.uniform(30.0, 50.0),
        v=rng.uniform(5.0, 8.0),
        policy=jitter_policy(base, rng),
        committed=False,
        conflict_s=merge_pt.s_on_path,
    )
    agents = [ego]
    conflicts = {"ego": merge_pt.location}
    main = routes["main"]
    s_merge_main, _, _ = project_many(main, np.asarray(merge_pt.location)[None, :])
    upstream = rng.uniform(18.0, 40.0)
    for k in range(max(0, n_agents - 1)):
        agents.append(
            _SimAgent(
                agent_id=f"m{k + 1}",
                route=main,
                s=float(s_merge_main[0]) - upstream - VEHICLE_LENGTH,
                v=rng.uniform(6.0, 9.0),
                policy=jitter_policy(base, rng),
            )
        )
        upstream += rng.uniform(10.0, 30.0)
    end_s = merge_pt.s_on_path + 6.0

    def done(ego_agent: _SimAgent, t: float) -> bool:
        return ego_agent.s + ego_agent.length > end_s

    return Scenario(
        roadmap=RoadMap(routes.values()), agents=agents, ego_id="ego",
        end_condition=done, conflicts=conflicts,
    )


def _scene_lane_change(template: MapTemplate, routes: Mapping[str, ReferencePath],
                       n_agents: int, base: DriverPolicy, rng: np.random.Generator) -> Scenario:
    lane0, lane1 = routes["lane0"], routes["lane1"]
    slow = replace(jitter_policy(base, rng), desired_speed=rng.uniform(2.5, 4.0))
    ego = _SimAgent(
        agent_id="ego",
        route=lane0,
        s=rng.uniform(8.0, 16.0),
        v=rng.uniform(6.0, 8.5),
        policy=jitter_policy(base, rng),
        committed=False,
        conflict_s=None,
        lane_target_d=2 * LANE_OFFSET,
    )
    leader = _SimAgent(
        agent_id="lead",
        route=lane0,
        s=ego.s + rng.uniform(16.0, 26.0),
        v=slow.desired_speed,
        policy=slow,
    )
    agents = [ego, leader]
    for k in range(max(0, n_agents - 2)):
        agents.append(
            _SimAgent(
                agent_id=f"b{k + 1}",
                route=lane1,
                s=ego.s + rng.uniform(-30.0, 10.0) - k * rng.uniform(14.0, 28.0),
                v=rng.uniform(6.0, 9.0),
                policy=jitter_policy(base, rng),
            )
        )

    def done(ego_agent: _SimAgent, t: float) -> bool:
        return (
            ego_agent.lane_change_started is not None
            and t > ego_agent.lane_change_started + 3.5
        ) or ego_agent.s > lane0.length - 10.0

    return Scenario(
        roadmap=RoadMap(routes.values()), agents=agents, ego_id="ego",
        end_condition=done, conflicts={"ego": None},
    )


_SCENES = {
    "roundabout": _scene_roundabout,
    "t-intersection": _scene_tint,
    "merge": _scene_merge,
    "lane-change": _scene_lane_change,
}


def route_set_for(template: MapTemplate) -> dict[str, ReferencePath]:
    if template.kind == "roundabout":
        return roundabout_route_set(template)
    return dict(template.paths)


def _lane_change_decision(agents: list[_SimAgent], ego: _SimAgent, t: float) -> None:
    """Commit to the adjacent lane when the gap beside the bumper is open."""
    if ego.committed or ego.lane_change_started is not None:
        return
    lane1_agents = [a for a in agents if a.route.path_id == "lane1"]
    bumper = ego.s + ego.length
    lead_ok = True
    lag_ok = True
    for other in lane1_agents:
        rel = other.s - ego.s
        if rel >= 0 and rel - ego.length < ego.policy.min_gap + 4.0:
            lead_ok = False
        if rel < 0:
            closing = max(other.v - ego.v, 0.1)
            if (-rel - other.length) / closing < ego.policy.gap_threshold * 0.8 or -rel < other.length + 3.0:
                lag_ok = False
    if lead_ok and lag_ok and t > 1.0:
        ego.committed = True
        ego.lane_change_started = t
        ego.route = ego.route  # stays on lane0; lateral offset does the move


def simulate_episode(
    template: MapTemplate,
    n_agents: int,
    policies: DriverPolicy | None,
    seed: int,
    duration: float = 20.0,
    routes: Mapping[str, ReferencePath] | None = None,
) -> Episode:
    """Run one scripted episode; deterministic for a fixed seed."""
    if n_agents < 1:
        raise SpawnFailure("need at least one agent")
    if duration > 120.0:
        raise SpawnFailure("duration capped at 120 s")
    base = policies or DriverPolicy()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    routes = routes or route_set_for(template)
    scenario = _SCENES[template.kind](template, routes, n_agents, base, rng)
    agents = scenario.agents
    conflicts = scenario.conflicts
    _check_spawn_spacing(agents)
    ego = next(a for a in agents if a.agent_id == scenario.ego_id)
    snapshots = [_snapshot(agents, scenario.roadmap, scenario.ego_id, 0.0)]
    n_steps = int(round(duration / DT))
    for k in range(1, n_steps + 1):
        t = k * DT
        if template.kind == "lane-change":
            _lane_change_decision(agents, ego, t)
            ego.committed = ego.committed or ego.lane_change_started is not None
        else:
            _update_commitments(agents, conflicts, t)
        for a in agents:
            _step_agent(agents, a, t)
        _lane_change_lateral(ego, t)
        snapshots.append(_snapshot(agents, scenario.roadmap, scenario.ego_id, t))
        if scenario.end_condition(ego, t):
            break
    return Episode(snapshots=tuple(snapshots), ego_id=scenario.ego_id)


# ---------------------------------------------------------------------------
# labeling


def _bumper_xy(scene: SceneSnapshot, agent_id: str) -> tuple[float, float]:
    a = scene.agent(agent_id)
    path = scene.maps.path(a.path_id)
    s = min(a.pose.s + a.length, path.length)
    return to_cartesian(path, FrenetPose(s, a.pose.d))


def _insertion_event(scene: SceneSnapshot, graph: SemanticGraph2D) -> tuple[str, float] | None:
    """Detect completed insertion; returns (dia_id, bumper offset in gap)."""
    ego = scene.agent(scene.ego_id)
    ego_path = scene.maps.path(ego.path_id)
    bumper = _bumper_xy(scene, scene.ego_id)
    pt = np.asarray(bumper)[None, :]
    for dia in graph.dias:
        if dia.ref_path == ego.path_id:
            continue
        path = scene.maps.path(dia.ref_path)
        s_on, d_on, dist = project_many(path, pt)
        if dist[0] > LANE_HALF:
            continue
        if dia.rear_s - 0.2 <= s_on[0] <= dia.front_s + 0.2:
            return dia.dia_id, float(s_on[0] - dia.rear_s)
    # passing the active point while staying in the own-lane gap
    if ego.pose.s + ego.length >= graph.rpt_act.s_on_path and abs(ego.pose.d) < LANE_HALF:
        return graph.reference_node, 0.0
    return None


def label_episode(
    episode: Episode,
    graphs: Sequence[SemanticGraph2D] | None = None,
) -> Episode:
    """Attach per-frame insertion labels.

    The insertion frame is the first where the predicted vehicle's bumper
    sits inside a candidate gap (laterally within the lane, longitudinally
    between the bounds) or passes the active point inside its own front
    gap. Earlier frames are labeled with that gap's identity, the time
    left, and the location targets fixed at the insertion frame.
    """
    if graphs is None:
        graphs = [build_2dsg(s, episode.ego_id) for s in episode.snapshots]
    hit: tuple[int, str, float] | None = None
    for idx, (scene, graph) in enumerate(zip(episode.snapshots, graphs)):
        ev = _insertion_event(scene, graph)
        if ev is not None:
            hit = (idx, ev[0], ev[1])
            break
    if hit is None:
        raise NoInsertion(f"ego {episode.ego_id!r} never completed an insertion")
    t_idx, dia_id, y_s2 = hit
    t_insert = episode.snapshots[t_idx].timestamp
    feats = graphs[t_idx].features_by_id(dia_id)
    y_s1 = 0.5 * (feats.d_lon_f + feats.d_lon_r)
    labels: list[FrameLabel | None] = []
    for idx, graph in enumerate(graphs):
        if idx > t_idx:
            labels.append(None)
            continue
        if dia_id not in graph.node_ids:
            labels.append(None)
            continue
        y = np.array([y_s1, y_s2, t_insert - episode.snapshots[idx].timestamp])
        labels.append(FrameLabel(dia_id=dia_id, y=y))
    return replace(
        episode,
        labels=tuple(labels),
        insertion_time=t_insert,
        inserted_dia=dia_id,
    )
