import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dia_sgn.errors import (
    DegeneratePath,
    InvalidReferencePoint,
    NoRelation,
    OffCorridor,
    OutOfRange,
)
from dia_sgn.static_env import (
    FrenetPose,
    OverlapKind,
    PointKind,
    classify_overlap,
    dump_scene,
    fit_reference_path,
    load_scene,
    scene_to_json,
    tangent_heading,
    to_cartesian,
    to_frenet,
    with_ref_points,
)
from helpers import arc_length_quadrature, quarter_circle_points, random_smooth_path


def straight(path_id="a", a=(0.0, 0.0), b=(100.0, 0.0), limit=10.0):
    return fit_reference_path([a, b], limit, path_id=path_id)


class TestFitReferencePath:
    def test_straight_length(self):
        assert straight().length == pytest.approx(100.0, abs=1e-9)

    def test_duplicate_waypoint_dropped(self):
        p = fit_reference_path([(0, 0), (0, 0), (1, 0)], 10.0)
        assert p.length == pytest.approx(1.0, abs=1e-9)

    def test_quarter_circle_arc_length(self):
        # oracle: analytic quarter-circle arc length
        p = fit_reference_path(quarter_circle_points(10.0, 64), 10.0)
        assert abs(p.length - 5 * math.pi) < 1e-3

    def test_degenerate_rejected(self):
        with pytest.raises(DegeneratePath):
            fit_reference_path([(3, 4)], 10.0)
        with pytest.raises(DegeneratePath):
            fit_reference_path([(3, 4), (3, 4)], 10.0)

    def test_arclen_matches_segments(self):
        p = random_smooth_path(np.random.default_rng(0))
        seg = np.hypot(*(p.waypoints[1:] - p.waypoints[:-1]).T)
        assert np.allclose(np.diff(p.arclen), seg, atol=1e-9)
        assert p.arclen[0] == 0.0
        assert np.all(np.diff(p.arclen) > 0)

    def test_resample_step_respected(self):
        p = straight()
        assert np.max(np.diff(p.arclen)) <= 0.5 + 1e-12


class TestToFrenet:
    def test_on_path_point(self):
        pose = to_frenet(straight(), (5.0, 0.0))
        assert pose.s == pytest.approx(5.0, abs=1e-9)
        assert pose.d == pytest.approx(0.0, abs=1e-9)

    def test_left_offset_positive(self):
        pose = to_frenet(straight(), (5.0, 2.0))
        assert pose.s == pytest.approx(5.0, abs=1e-9)
        assert pose.d == pytest.approx(2.0, abs=1e-9)

    def test_quarter_circle_midpoint(self):
        # oracle: numerical arc-length integration of the circle up to 45 deg
        expected_s = arc_length_quadrature(
            lambda t: 10 * np.cos(t), lambda t: 10 * np.sin(t), 0.0, np.pi / 4
        )
        p = fit_reference_path(quarter_circle_points(10.0, 64), 10.0)
        pose = to_frenet(p, (10 * math.cos(math.pi / 4), 10 * math.sin(math.pi / 4)))
        assert abs(pose.s - expected_s) < 1e-3
        assert abs(pose.d) < 1e-3

    def test_off_corridor(self):
        with pytest.raises(OffCorridor):
            to_frenet(straight(), (50.0, 40.0))


class TestToCartesian:
    def test_trivial(self):
        assert to_cartesian(straight(), FrenetPose(5.0, 0.0)) == pytest.approx((5.0, 0.0))
        assert to_cartesian(straight(), FrenetPose(5.0, 2.0)) == pytest.approx((5.0, 2.0))

    def test_quarter_circle_midpoint(self):
        p = fit_reference_path(quarter_circle_points(10.0, 64), 10.0)
        x, y = to_cartesian(p, FrenetPose(7.85398, 0.0))
        assert abs(x - 7.0711) < 1e-3
        assert abs(y - 7.0711) < 1e-3

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            to_cartesian(straight(), FrenetPose(101.0, 0.0))
        with pytest.raises(OutOfRange):
            to_cartesian(straight(), FrenetPose(-1.0, 0.0))


class TestTangentHeading:
    def test_straight_axes(self):
        assert tangent_heading(straight(), 3.0) == pytest.approx(0.0)
        up = fit_reference_path([(0, 0), (0, 10)], 10.0)
        assert tangent_heading(up, 5.0) == pytest.approx(math.pi / 2)

    def test_quarter_circle_45deg(self):
        p = fit_reference_path(quarter_circle_points(10.0, 64), 10.0)
        assert abs(tangent_heading(p, 5 * math.pi / 2) - 3 * math.pi / 4) < 1e-3

    def test_range_convention(self):
        left = fit_reference_path([(0, 0), (-10, 0)], 10.0)
        assert tangent_heading(left, 5.0) == pytest.approx(math.pi)


class TestClassifyOverlap:
    def test_perpendicular_crossing(self):
        a = straight("a")
        b = fit_reference_path([(50, -50), (50, 50)], 10.0, path_id="b")
        ov = classify_overlap(a, b)
        assert ov.kind is OverlapKind.POINT
        assert ov.point == pytest.approx((50.0, 0.0), abs=1e-9)

    def test_merge_common_suffix(self):
        # oracle: polyline common suffix begins at the junction (60, 0)
        through = fit_reference_path([(0, 0), (120, 0)], 10.0, path_id="through")
        merging = fit_reference_path([(0, -20), (30, -20), (60, 0), (120, 0)], 10.0, path_id="m")
        ov = classify_overlap(merging, through)
        assert ov.kind is OverlapKind.LINE
        assert np.hypot(ov.point[0] - 60.0, ov.point[1] - 0.0) < 0.6
        assert classify_overlap(through, merging).kind is OverlapKind.LINE

    def test_parallel_offset(self):
        a = straight("a")
        b = fit_reference_path([(0, 3.5), (100, 3.5)], 10.0, path_id="b")
        assert classify_overlap(a, b).kind is OverlapKind.UNDECIDED
        assert classify_overlap(a, b).point is None

    def test_no_relation(self):
        a = straight("a")
        b = fit_reference_path([(0, 40), (100, 40)], 10.0, path_id="b")
        with pytest.raises(NoRelation):
            classify_overlap(a, b)

    def test_kind_symmetric_random(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = random_smooth_path(rng, "a")
            b = random_smooth_path(rng, "b")
            try:
                k_ab = classify_overlap(a, b).kind
            except NoRelation:
                with pytest.raises(NoRelation):
                    classify_overlap(b, a)
                continue
            assert classify_overlap(b, a).kind is k_ab


class TestFrenetProperties:
    def test_round_trip(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            path = random_smooth_path(rng)
            s = rng.uniform(0.0, path.length, size=50)
            d = rng.uniform(-3.0, 3.0, size=50)
            for si, di in zip(s, d):
                p = to_cartesian(path, FrenetPose(si, di))
                pose = to_frenet(path, p)
                p2 = to_cartesian(path, pose)
                assert math.hypot(p2[0] - p[0], p2[1] - p[1]) < 1e-6

    def test_s_monotone_along_path(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            path = random_smooth_path(rng)
            svals = np.sort(rng.uniform(0, path.length, size=40))
            pts = [to_cartesian(path, FrenetPose(s, 0.3)) for s in svals]
            proj = [to_frenet(path, p).s for p in pts]
            assert np.all(np.diff(proj) >= -1e-9)

    @given(
        x=st.floats(1.0, 99.0),
        y=st.floats(-5.0, 5.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_reflection_flips_d_exactly(self, x, y):
        path = straight()
        d1 = to_frenet(path, (x, y)).d
        d2 = to_frenet(path, (x, -y)).d
        assert abs(d1 + d2) < 1e-9


class TestReferencePoints:
    def test_attach_and_sort(self):
        p = with_ref_points(
            straight(),
            [
                {"kind": "StopLine", "location": (40.0, 0.0)},
                {"kind": "PointOverlap", "location": (20.0, 0.02), "partner_path": "b"},
            ],
        )
        assert [rp.kind for rp in p.ref_points] == [PointKind.POINT_OVERLAP, PointKind.STOP_LINE]
        assert p.ref_points[0].point_id == "a:rp0"
        assert p.ref_points[0].s_on_path == pytest.approx(20.0, abs=1e-6)

    def test_off_path_point_rejected(self):
        with pytest.raises(InvalidReferencePoint):
            with_ref_points(straight(), [{"kind": "StopLine", "location": (40.0, 0.5)}])

    def test_kind_constraints(self):
        with pytest.raises(InvalidReferencePoint):
            with_ref_points(straight(), [{"kind": "PointOverlap", "location": (40.0, 0.0)}])
        with pytest.raises(InvalidReferencePoint):
            with_ref_points(
                straight(), [{"kind": "StopLine", "location": (40.0, 0.0), "partner_path": "b"}]
            )
        with pytest.raises(InvalidReferencePoint):
            with_ref_points(straight(), [{"kind": "TrafficLight", "location": (40.0, 0.0)}])


class TestSceneJson:
    def _paths(self):
        a = with_ref_points(
            straight("a"),
            [
                {"kind": "TrafficLight", "location": (40.0, 0.0), "light_state": "Red"},
                {"kind": "PointOverlap", "location": (60.0, 0.0), "partner_path": "b"},
            ],
        )
        b = fit_reference_path([(60, -30), (60, 30)], 8.0, path_id="b")
        return [a, b]

    def test_round_trip(self):
        text = scene_to_json(self._paths())
        loaded = load_scene(text)
        again = scene_to_json(loaded.values())
        assert again == text
        a = loaded["a"]
        assert a.ref_points[0].light_state is not None
        assert a.ref_points[1].partner_path == "b"

    def test_documented_structure(self):
        doc = dump_scene(self._paths())
        assert set(doc) == {"paths"}
        entry = doc["paths"][0]
        assert set(entry) == {"id", "waypoints", "speed_limit", "ref_points"}
        json.dumps(doc)  # serializable
