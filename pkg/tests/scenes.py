"""Twelve hand-constructed scenes with hand-enumerated extraction oracles.

Each scene factory returns ``(SceneSnapshot, Expectation)``. Expectations
were enumerated by hand from the extraction rules: which point becomes the
active reference point, which gaps exist, and what bounds them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dia_sgn.dynamic_env import AgentState, RoadMap, SceneSnapshot, SourceKind
from dia_sgn.static_env import (
    FrenetPose,
    LightState,
    PointKind,
    annotate_topology,
    fit_reference_path,
    with_ref_points,
)


@dataclass(frozen=True)
class ExpectedDia:
    dia_id: str
    front_kind: SourceKind
    rear_kind: SourceKind
    front_agent: str | None = None
    l: float | None = None          # approx, tol 1e-6 unless None
    v_f: float | None = None


@dataclass(frozen=True)
class Expectation:
    rpt_kind: PointKind
    rpt_location: tuple[float, float]
    dias: tuple[ExpectedDia, ...]
    needs_transform: bool = False


def ag(agent_id, path_id, s, v=8.0, a=0.0, length=4.0, d=0.0):
    return AgentState(agent_id, path_id, FrenetPose(s, d), v, a, length)


def _scene(paths, agents, ego="ego", lights=None, t=0.0):
    return SceneSnapshot(
        timestamp=t,
        agents=tuple(agents),
        maps=RoadMap(paths),
        ego_id=ego,
        light_states=lights or {},
    )


def _straight(pid, a, b, limit=10.0):
    return fit_reference_path([a, b], limit, path_id=pid)


# -- 1. point-overlap with a leader and a crossing car ----------------------

def scene_point_overlap_lead():
    a = _straight("a", (0, 0), (100, 0), 10.0)
    b = _straight("b", (50, -50), (50, 50), 8.0)
    a, b = annotate_topology([a, b])
    scene = _scene([a, b], [ag("ego", "a", 10), ag("lead", "a", 30), ag("cross", "b", 20, v=7)])
    exp = Expectation(
        rpt_kind=PointKind.POINT_OVERLAP,
        rpt_location=(50.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.AGENT, SourceKind.AGENT, "lead", l=16.0),
            ExpectedDia("b:cross", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=26.0, v_f=8.0),
        ),
    )
    return scene, exp


# -- 2. empty crossing path: fallback horizon point --------------------------

def scene_fallback_horizon():
    a = _straight("a", (0, 0), (100, 0), 10.0)
    b = _straight("b", (50, -50), (50, 50), 8.0)
    a, b = annotate_topology([a, b])
    scene = _scene([a, b], [ag("ego", "a", 10)])
    exp = Expectation(
        rpt_kind=PointKind.HORIZON,
        rpt_location=(44.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.SPEED_LIMIT_HORIZON, SourceKind.AGENT, l=30.0, v_f=10.0),
        ),
    )
    return scene, exp


# -- 3. merge (line-overlap) --------------------------------------------------

def scene_merge_line_overlap():
    through = _straight("through", (0, 0), (120, 0), 12.0)
    merging = fit_reference_path(
        [(0, -20), (30, -20), (60, 0), (120, 0)], 10.0, path_id="merging"
    )
    merging, through = annotate_topology([merging, through])
    junction = next(p for p in merging.ref_points if p.kind is PointKind.LINE_OVERLAP)
    scene = _scene(
        [merging, through], [ag("ego", "merging", 10), ag("m1", "through", 30, v=11)]
    )
    exp = Expectation(
        rpt_kind=PointKind.LINE_OVERLAP,
        rpt_location=junction.location,
        dias=(
            ExpectedDia("merging:ego", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, v_f=10.0),
            ExpectedDia("through:m1", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, v_f=12.0),
        ),
    )
    return scene, exp


# -- 4. undecided overlap (lane change beside two cars) ----------------------

def scene_lane_change_undecided():
    a = _straight("a", (0, 0), (100, 0), 10.0)
    c = _straight("c", (0, 3.5), (100, 3.5), 10.0)
    scene = _scene([a, c], [ag("ego", "a", 20), ag("c1", "c", 10, v=9), ag("c2", "c", 40, v=9)])
    exp = Expectation(
        rpt_kind=PointKind.HORIZON,
        rpt_location=(54.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.SPEED_LIMIT_HORIZON, SourceKind.AGENT, l=30.0, v_f=10.0),
            ExpectedDia("c:c1", SourceKind.AGENT, SourceKind.AGENT, "c2", l=26.0),
        ),
    )
    return scene, exp


# -- 5. red light preempts a crossing point ----------------------------------

def _light_scene(light: LightState):
    a = _straight("a", (0, 0), (100, 0), 10.0)
    b = _straight("b", (60, -60), (60, 60), 8.0)
    a, b = annotate_topology([a, b])
    a = with_ref_points(
        a,
        [
            {
                "kind": rp.kind,
                "location": rp.location,
                **({"partner_path": rp.partner_path} if rp.partner_path else {}),
            }
            for rp in a.ref_points
        ]
        + [{"kind": "TrafficLight", "location": (40.0, 0.0), "light_state": light.value}],
    )
    return _scene([a, b], [ag("ego", "a", 10), ag("b1", "b", 35, v=7)])


def scene_red_light():
    scene = _light_scene(LightState.RED)
    exp = Expectation(
        rpt_kind=PointKind.TRAFFIC_LIGHT,
        rpt_location=(40.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.STOP_LINE, SourceKind.AGENT, l=26.0, v_f=0.0),
        ),
    )
    return scene, exp


# -- 6. same junction, green light: topological point takes over -------------

def scene_green_light():
    scene = _light_scene(LightState.GREEN)
    exp = Expectation(
        rpt_kind=PointKind.POINT_OVERLAP,
        rpt_location=(60.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=46.0, v_f=10.0),
            ExpectedDia("b:b1", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=21.0, v_f=8.0),
        ),
    )
    return scene, exp


# -- 7. red/green flip beside a sibling lane (count must not change) ---------

def scene_light_with_parallel(light: LightState):
    a = with_ref_points(
        _straight("a", (0, 0), (100, 0), 10.0),
        [{"kind": "TrafficLight", "location": (40.0, 0.0), "light_state": light.value}],
    )
    c = _straight("c", (0, 3.5), (100, 3.5), 10.0)
    scene = _scene([a, c], [ag("ego", "a", 10), ag("c1", "c", 10, v=9), ag("c2", "c", 40, v=9)])
    if light is LightState.RED:
        exp = Expectation(
            rpt_kind=PointKind.TRAFFIC_LIGHT,
            rpt_location=(40.0, 0.0),
            dias=(
                ExpectedDia("a:ego", SourceKind.STOP_LINE, SourceKind.AGENT, l=26.0, v_f=0.0),
                ExpectedDia("c:c1", SourceKind.AGENT, SourceKind.AGENT, "c2", l=26.0),
            ),
        )
    else:
        exp = Expectation(
            rpt_kind=PointKind.HORIZON,
            rpt_location=(44.0, 0.0),
            dias=(
                ExpectedDia("a:ego", SourceKind.SPEED_LIMIT_HORIZON, SourceKind.AGENT, l=30.0, v_f=10.0),
                ExpectedDia("c:c1", SourceKind.AGENT, SourceKind.AGENT, "c2", l=26.0),
            ),
        )
    return scene, exp


def scene_red_with_parallel():
    return scene_light_with_parallel(LightState.RED)


def scene_green_with_parallel():
    return scene_light_with_parallel(LightState.GREEN)


# -- 8/9. stop sign, both stages ----------------------------------------------

def _stop_sign_scene(ego_s, ego_v):
    a = _straight("a", (0, 0), (100, 0), 10.0)
    b = _straight("b", (70, -60), (70, 60), 8.0)
    a, b = annotate_topology([a, b])
    a = with_ref_points(
        a,
        [
            {
                "kind": rp.kind,
                "location": rp.location,
                **({"partner_path": rp.partner_path} if rp.partner_path else {}),
            }
            for rp in a.ref_points
        ]
        + [{"kind": "StopLine", "location": (50.0, 0.0)}],
    )
    return _scene([a, b], [ag("ego", "a", ego_s, v=ego_v), ag("m1", "b", 30, v=7)])


def scene_stop_sign_stage1():
    scene = _stop_sign_scene(ego_s=30.0, ego_v=8.0)
    exp = Expectation(
        rpt_kind=PointKind.STOP_LINE,
        rpt_location=(50.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.VIRTUAL_STOP_LINE, SourceKind.AGENT, l=11.0, v_f=0.0),
        ),
        needs_transform=True,
    )
    return scene, exp


def scene_stop_sign_stage2():
    scene = _stop_sign_scene(ego_s=40.3, ego_v=0.0)
    exp = Expectation(
        rpt_kind=PointKind.POINT_OVERLAP,
        rpt_location=(70.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=25.7, v_f=10.0),
            # (70, 0) sits at s=60 on the vertical partner path; m1 bumper is at 34
            ExpectedDia("b:m1", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=26.0, v_f=8.0),
        ),
        needs_transform=True,
    )
    return scene, exp


# -- 10/11. yield sign: inert vs two-stage ------------------------------------

def _yield_scene(yield_limit, main_limit):
    a = _straight("a", (0, 0), (100, 0), yield_limit)
    b = _straight("b", (70, -60), (70, 60), main_limit)
    a, b = annotate_topology([a, b])
    a = with_ref_points(
        a,
        [
            {
                "kind": rp.kind,
                "location": rp.location,
                **({"partner_path": rp.partner_path} if rp.partner_path else {}),
            }
            for rp in a.ref_points
        ]
        + [{"kind": "YieldLine", "location": (50.0, 0.0)}],
    )
    return _scene([a, b], [ag("ego", "a", 30, v=min(yield_limit, 8.0)), ag("m1", "b", 30, v=7)])


def scene_yield_inert():
    scene = _yield_scene(yield_limit=10.0, main_limit=8.0)
    exp = Expectation(
        rpt_kind=PointKind.YIELD_LINE,
        rpt_location=(50.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=16.0, v_f=10.0),
        ),
        needs_transform=True,
    )
    return scene, exp


def scene_yield_two_stage():
    scene = _yield_scene(yield_limit=6.0, main_limit=12.0)
    exp = Expectation(
        rpt_kind=PointKind.YIELD_LINE,
        rpt_location=(50.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.VIRTUAL_STOP_LINE, SourceKind.AGENT, l=11.0, v_f=0.0),
        ),
        needs_transform=True,
    )
    return scene, exp


# -- 12. four candidate gaps at a crossing ------------------------------------

def scene_four_gaps():
    a = _straight("a", (0, 0), (100, 0), 10.0)
    b = _straight("b", (60, -60), (60, 60), 8.0)
    a, b = annotate_topology([a, b])
    scene = _scene(
        [a, b],
        [
            ag("ego", "a", 10),
            ag("b1", "b", 10, v=7),
            ag("b2", "b", 30, v=7),
            ag("b3", "b", 50, v=7),
        ],
    )
    exp = Expectation(
        rpt_kind=PointKind.POINT_OVERLAP,
        rpt_location=(60.0, 0.0),
        dias=(
            ExpectedDia("a:ego", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=46.0, v_f=10.0),
            ExpectedDia("b:b1", SourceKind.AGENT, SourceKind.AGENT, "b2", l=16.0),
            ExpectedDia("b:b2", SourceKind.AGENT, SourceKind.AGENT, "b3", l=16.0),
            ExpectedDia("b:b3", SourceKind.ACTIVE_REF_POINT, SourceKind.AGENT, l=6.0, v_f=8.0),
        ),
    )
    return scene, exp


ALL_SCENES = {
    "point_overlap_lead": scene_point_overlap_lead,
    "fallback_horizon": scene_fallback_horizon,
    "merge_line_overlap": scene_merge_line_overlap,
    "lane_change_undecided": scene_lane_change_undecided,
    "red_light": scene_red_light,
    "green_light": scene_green_light,
    "red_with_parallel": scene_red_with_parallel,
    "green_with_parallel": scene_green_with_parallel,
    "stop_sign_stage1": scene_stop_sign_stage1,
    "stop_sign_stage2": scene_stop_sign_stage2,
    "yield_inert": scene_yield_inert,
    "yield_two_stage": scene_yield_two_stage,
    "four_gaps": scene_four_gaps,
}
