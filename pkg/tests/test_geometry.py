import math

import numpy as np
import pytest

from lanelab.geometry import (
    DEFAULT_HALF_WIDTH,
    Pose,
    TrackBuildError,
    TrackShape,
    TrackSpec,
    WaypointPath,
    WindowState,
    build_track,
    interpolate_waypoints,
    lane_centeredness,
    load_track,
    marker_points,
    mirror_pose,
    nearest_waypoint,
    road_angle,
    save_track,
    wrap_angle,
)


def straight_path_along_x(length=10.0, spacing=0.02):
    # long thin loop; the bottom edge (y=0) serves as a straight reference path
    n = int(length / spacing)
    xs = np.arange(n) * spacing
    bottom = np.stack([xs, np.zeros(n)], axis=1)
    top = np.stack([xs[::-1], np.full(n, 5.0)], axis=1)
    return WaypointPath(np.vstack([bottom, [[length, 2.5]], top, [[-1.0, 2.5]]]),
                        detect_intersections=False)


class TestInterpolation:
    def test_midpoint_inserted(self):
        out = interpolate_waypoints([(0.0, 0.0), (0.0, 1.0)], max_gap=0.5)
        assert any(np.allclose(p, (0.0, 0.5)) for p in out)

    def test_dense_path_unchanged(self):
        raw = [(0.0, 0.0), (0.02, 0.0), (0.02, 0.02), (0.0, 0.02)]
        out = interpolate_waypoints(raw, max_gap=0.025)
        assert np.allclose(out, raw)

    def test_gap_009_inserts_three_collinear(self):
        raw = np.array([[0.0, 0.0], [0.09, 0.0], [0.09, 0.09], [0.0, 0.09]])
        out = interpolate_waypoints(raw, max_gap=0.025)
        # points strictly between (0,0) and (0.09,0) on the first edge
        on_edge = out[(out[:, 1] == 0.0) & (out[:, 0] > 0) & (out[:, 0] < 0.09)]
        assert len(on_edge) == 3
        assert np.allclose(on_edge[:, 0], [0.0225, 0.045, 0.0675])

    def test_spacing_bounds_after_interpolation(self):
        rng = np.random.default_rng(3)
        ang = np.sort(rng.uniform(0, 2 * math.pi, 40))
        raw = np.stack([2 * np.cos(ang), 2 * np.sin(ang)], axis=1)
        out = interpolate_waypoints(raw, max_gap=0.025)
        gaps = np.linalg.norm(np.diff(out, axis=0, append=out[:1]), axis=1)
        assert gaps.max() <= 0.025 + 1e-12
        assert gaps.min() >= 0.0125 - 1e-12

    def test_degenerate_loop_rejected(self):
        with pytest.raises(TrackBuildError):
            interpolate_waypoints([(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])


class TestBuildTrack:
    def test_circle_radius_exact(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=2.0))
        r = np.linalg.norm(path.positions, axis=1)
        assert np.abs(r - 2.0).max() < 1e-9

    def test_rectangle_perimeter(self):
        path = build_track(TrackSpec(TrackShape.RECTANGLE, width=4.0, height=3.0))
        # oracle: sum of straight segment lengths of the generated loop
        assert abs(path.length - 14.0) < 1e-6

    def test_figure8_single_intersection_region(self):
        path = build_track(TrackSpec(TrackShape.FIGURE8, scale=2.2))
        assert path.has_self_intersection
        assert path.intersection_regions() == 1

    def test_figure8_matches_shapely_oracle(self):
        from shapely.geometry import LineString

        path = build_track(TrackSpec(TrackShape.FIGURE8, scale=2.2))
        line = LineString(np.vstack([path.positions, path.positions[:1]]))
        assert not line.is_simple  # shapely confirms a self-crossing exists
        circle = build_track(TrackSpec(TrackShape.CIRCLE, radius=2.0))
        cline = LineString(np.vstack([circle.positions, circle.positions[:1]]))
        assert cline.is_simple and not circle.has_self_intersection

    def test_oval_too_small_rejected(self):
        with pytest.raises(TrackBuildError):
            build_track(TrackSpec(TrackShape.OVAL, semi_major=0.5, semi_minor=0.3))

    def test_spacing_on_all_shapes(self):
        for shape in TrackShape:
            path = build_track(TrackSpec(shape))
            gaps = np.linalg.norm(
                np.diff(path.positions, axis=0, append=path.positions[:1]), axis=1)
            assert gaps.max() <= 0.025 + 1e-12, shape
            assert gaps.min() >= 0.0125 - 1e-12, shape

    def test_rounded_rectangle_has_arcs(self):
        path = build_track(
            TrackSpec(TrackShape.RECTANGLE_ROUNDED, width=4.0, height=3.0, corner_radius=0.8))
        # corner arc points sit exactly corner_radius from the corner centers
        c = np.array([2.0 - 0.8, 1.5 - 0.8])
        d = np.linalg.norm(path.positions - c, axis=1)
        near = path.positions[(d < 0.8 + 1e-6)]
        assert len(near) > 10


class TestNearestWaypoint:
    def test_on_waypoint(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=2.0))
        idx, nu = nearest_waypoint(path.positions[17], path)
        assert idx == 17
        assert np.linalg.norm(nu - path.positions[17]) == 0.0

    def test_tie_breaks_to_lower_index(self):
        pts = interpolate_waypoints(
            [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)], max_gap=0.5)
        path = WaypointPath(pts, detect_intersections=False)
        # equidistant from waypoints (0,0) and (0.5,0)
        idx, _ = nearest_waypoint((0.25, 0.1), path)
        d = np.linalg.norm(path.positions - np.array([0.25, 0.1]), axis=1)
        ties = np.nonzero(d <= d.min())[0]
        assert idx == ties.min()

    def test_window_equals_global_away_from_intersection(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=1.5))
        rng = np.random.default_rng(0)
        idx0 = 50
        win = WindowState(idx0)
        for step in range(200):
            target = path.positions[(idx0 + step) % len(path)]
            p = target + rng.normal(0, 0.005, 2)
            gi, _ = nearest_waypoint(p, path)
            wi, _ = nearest_waypoint(p, path, win)
            assert gi == wi

    def test_figure8_window_disambiguates_crossing(self):
        path = build_track(TrackSpec(TrackShape.FIGURE8, scale=2.2))
        # crossing region: the waypoint pair flagged by the brute-force check
        i, j = path.crossing_pairs[0]
        p_cross = path.positions[i]
        # approach along the i-branch: window state anchored a few points before i
        win = WindowState((i - 5) % len(path))
        wi, _ = nearest_waypoint(p_cross + 1e-4, path, win)
        assert min(abs(wi - i), len(path) - abs(wi - i)) <= 12
        # a fresh window anchored on the j-branch stays on the j-branch
        win_j = WindowState((j - 5) % len(path))
        wj, _ = nearest_waypoint(p_cross + 1e-4, path, win_j)
        assert min(abs(wj - j), len(path) - abs(wj - j)) <= 12
        assert wi != wj


class TestLaneCenteredness:
    def test_left_of_path_is_positive_half(self):
        path = straight_path_along_x()
        pose = Pose(np.array([1.0, 0.19]), 0.0)
        assert lane_centeredness(pose, path, 0.38) == pytest.approx(0.5, abs=1e-9)

    def test_on_centerline_zero(self):
        path = straight_path_along_x()
        pose = Pose(np.array([1.0, 0.0]), 0.0)
        assert lane_centeredness(pose, path, 0.38) == pytest.approx(0.0, abs=1e-12)

    def test_clipped_at_one(self):
        path = straight_path_along_x()
        pose = Pose(np.array([1.0, 1.0]), 0.0)
        assert lane_centeredness(pose, path, 0.38) == 1.0

    def test_right_of_path_negative(self):
        path = straight_path_along_x()
        pose = Pose(np.array([1.0, -0.19]), 0.0)
        assert lane_centeredness(pose, path, 0.38) == pytest.approx(-0.5, abs=1e-9)

    def test_circle_closed_form(self):
        radius = 2.0
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=radius))
        # poses radially aligned with waypoints so the nearest-waypoint distance is exact
        for k in [0, 31, 113, 200]:
            wp = path.positions[k]
            u = wp / np.linalg.norm(wp)
            for dr in [-0.3, -0.1, 0.05, 0.2]:
                pose = Pose(wp + dr * u, 0.0)
                alpha = lane_centeredness(pose, path, DEFAULT_HALF_WIDTH)
                # CCW circle: outward radial offset is to the right of travel
                assert alpha == pytest.approx(-dr / DEFAULT_HALF_WIDTH, abs=1e-6)


class TestRoadAngle:
    def test_aligned_zero(self):
        path = straight_path_along_x()
        assert road_angle(Pose(np.array([1.0, 0.0]), 0.0), path) == pytest.approx(0.0, abs=1e-9)

    def test_yaw_quarter_turn(self):
        path = straight_path_along_x()
        beta = road_angle(Pose(np.array([1.0, 0.0]), math.pi / 4), path)
        assert beta == pytest.approx(-math.pi / 4, abs=1e-9)

    def test_opposite_heading_clipped(self):
        path = straight_path_along_x()
        beta = road_angle(Pose(np.array([1.0, 0.0]), math.pi), path)
        assert abs(beta) == pytest.approx(math.pi / 2, abs=1e-12)

    def test_circle_tangent_closed_form(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=2.0))
        k = 77
        wp = path.positions[k]
        heading = math.atan2(wp[0], -wp[1])  # CCW tangent = rotate radial by +90deg
        beta = road_angle(Pose(wp, heading - 0.3), path)
        assert beta == pytest.approx(0.3, abs=1e-6)


class TestFlipSymmetry:
    def test_alpha_beta_negate_exactly(self):
        path = build_track(TrackSpec(TrackShape.COMPLEX_SPLINE, seed=5))
        mirrored = path.mirrored()
        rng = np.random.default_rng(11)
        for _ in range(50):
            k = int(rng.integers(len(path)))
            offset = rng.normal(0, 0.1, 2)
            yaw = rng.uniform(-math.pi, math.pi)
            pose = Pose(path.positions[k] + offset, yaw)
            mpose = mirror_pose(pose)
            a1 = lane_centeredness(pose, path, 0.38)
            a2 = lane_centeredness(mpose, mirrored, 0.38)
            assert a1 == -a2
            b1 = road_angle(pose, path)
            b2 = road_angle(mpose, mirrored)
            assert b1 == -b2

    def test_ranges_always_hold(self):
        path = build_track(TrackSpec(TrackShape.FIGURE8))
        rng = np.random.default_rng(2)
        for _ in range(200):
            pose = Pose(rng.normal(0, 2.0, 2), rng.uniform(-math.pi, math.pi))
            a = lane_centeredness(pose, path, 0.38)
            b = road_angle(pose, path)
            assert -1.0 <= a <= 1.0
            assert -math.pi / 2 <= b <= math.pi / 2


class TestMarkerAndIO:
    def test_marker_offset_distance(self):
        path = build_track(TrackSpec(TrackShape.CIRCLE, radius=2.0))
        left = marker_points(path, 0.38)
        r = np.linalg.norm(left, axis=1)
        # left of CCW travel points inward
        assert np.abs(r - (2.0 - 0.38)).max() < 1e-3

    def test_track_file_round_trip(self, tmp_path):
        path = build_track(TrackSpec(TrackShape.OVAL))
        f = tmp_path / "oval.track"
        save_track(path, f)
        loaded = load_track(f)
        assert len(loaded) == len(path)
        assert np.allclose(loaded.positions, path.positions, atol=1e-12)

    def test_bad_header_rejected(self, tmp_path):
        f = tmp_path / "bad.track"
        f.write_text("nonsense\n0 0\n1 1\n")
        with pytest.raises(TrackBuildError):
            load_track(f)


def test_wrap_angle_interval():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.3) == pytest.approx(0.3)
