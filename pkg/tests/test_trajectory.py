import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scene_align.trajectory import (AgentPose, Scene, Trajectory, constant_velocity_extrapolate,
                                    cross_min_distances, from_agent_frame, heading_from_history,
                                    min_pairwise_distance, normalize_angle, to_agent_frame)

coord = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-10.0, 10.0, allow_nan=False)


def traj_strategy(min_len=1, max_len=15):
    return st.integers(min_len, max_len).flatmap(
        lambda n: arrays(np.float64, (n, 2), elements=coord)).map(Trajectory)


class TestTypes:
    def test_rejects_non_finite_points(self):
        with pytest.raises(ValueError):
            Trajectory([[0.0, np.nan]])

    def test_rejects_empty_and_bad_dt(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            Trajectory([[0, 0]], dt=0.0)

    def test_points_are_read_only(self):
        t = Trajectory([[0, 0], [1, 1]])
        with pytest.raises(ValueError):
            t.points[0, 0] = 5

    def test_default_dt(self):
        assert Trajectory([[0, 0]]).dt == 0.4

    @given(angle)
    def test_pose_heading_normalized(self, a):
        h = AgentPose((0, 0), a).heading
        assert -math.pi < h <= math.pi
        assert math.isclose(math.cos(h), math.cos(a), abs_tol=1e-9)
        assert math.isclose(math.sin(h), math.sin(a), abs_tol=1e-9)

    def test_pi_maps_to_pi(self):
        assert normalize_angle(-math.pi) == math.pi
        assert normalize_angle(math.pi) == math.pi

    def test_scene_rejects_mismatched_histories(self):
        with pytest.raises(ValueError):
            Scene([0, 1], [Trajectory(np.zeros((8, 2))), Trajectory(np.zeros((7, 2)))])

    def test_scene_rejects_mismatched_futures(self):
        h = [Trajectory(np.zeros((8, 2)))] * 2
        with pytest.raises(ValueError):
            Scene([0, 1], h, [Trajectory(np.zeros((12, 2))), Trajectory(np.zeros((11, 2)))])


class TestHeading:
    def test_plus_x(self):
        assert heading_from_history(Trajectory([[0, 0], [1, 0]])) == (0.0, False)

    def test_plus_y(self):
        h, deg = heading_from_history(Trajectory([[0, 0], [0, 2]]))
        assert h == pytest.approx(math.pi / 2) and not deg

    def test_stationary_is_degenerate(self):
        assert heading_from_history(Trajectory([[0, 0], [0, 0]])) == (0.0, True)

    def test_trailing_stop_uses_last_motion(self):
        h, deg = heading_from_history(Trajectory([[0, 0], [0, -1], [0, -1], [0, -1]]))
        assert h == pytest.approx(-math.pi / 2) and not deg

    def test_too_short(self):
        with pytest.raises(ValueError):
            heading_from_history(Trajectory([[0, 0]]))


class TestFrames:
    def test_translation_only(self):
        out = to_agent_frame(Trajectory([[1, 0]]), AgentPose((1, 0), 0))
        np.testing.assert_allclose(out.points, [[0, 0]], atol=1e-12)

    def test_pure_rotation(self):
        out = to_agent_frame(Trajectory([[0, 1]]), AgentPose((0, 0), math.pi / 2))
        np.testing.assert_allclose(out.points, [[1, 0]], atol=1e-12)

    def test_from_translation(self):
        out = from_agent_frame(Trajectory([[0, 0]]), AgentPose((3, 4), 0))
        np.testing.assert_allclose(out.points, [[3, 4]], atol=1e-12)

    def test_from_rotation(self):
        out = from_agent_frame(Trajectory([[1, 0]]), AgentPose((0, 0), math.pi / 2))
        np.testing.assert_allclose(out.points, [[0, 1]], atol=1e-12)

    @given(traj_strategy(), coord, coord, angle)
    def test_round_trip(self, t, px, py, a):
        pose = AgentPose((px, py), a)
        back = from_agent_frame(to_agent_frame(t, pose), pose)
        np.testing.assert_allclose(back.points, t.points, atol=1e-9, rtol=0)
        back2 = to_agent_frame(from_agent_frame(t, pose), pose)
        np.testing.assert_allclose(back2.points, t.points, atol=1e-9, rtol=0)

    @given(coord, coord, angle)
    def test_pose_maps_to_origin_and_heading_to_plus_x(self, px, py, a):
        pose = AgentPose((px, py), a)
        ahead = [px + math.cos(a), py + math.sin(a)]
        out = to_agent_frame(Trajectory([[px, py], ahead]), pose).points
        np.testing.assert_allclose(out, [[0, 0], [1, 0]], atol=1e-9)

    @given(traj_strategy(), coord, coord, angle)
    def test_rigid_motion_preserves_distances(self, t, px, py, a):
        out = to_agent_frame(t, AgentPose((px, py), a)).points
        d_in = np.linalg.norm(t.points[:, None] - t.points[None], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-8)


class TestExtrapolation:
    def test_two_points(self):
        out = constant_velocity_extrapolate(Trajectory([[0, 0], [1, 0]]), 3)
        np.testing.assert_allclose(out.points, [[2, 0], [3, 0], [4, 0]])

    def test_stationary(self):
        out = constant_velocity_extrapolate(Trajectory([[2, 5]] * 8), 12)
        np.testing.assert_array_equal(out.points, np.tile([2, 5], (12, 1)))

    def test_uses_last_three_displacements(self):
        h = Trajectory([[0, 0], [10, 0], [11, 0], [13, 0], [16, 0]])
        out = constant_velocity_extrapolate(h, 1)
        # mean of (1, 2, 3)
        np.testing.assert_allclose(out.points, [[18, 0]])

    @given(arrays(np.float64, st.tuples(st.integers(2, 10), st.just(2)), elements=coord), st.integers(1, 15))
    def test_matches_hand_oracle(self, pts, steps):
        n = min(3, len(pts) - 1)
        vx = sum(pts[-i][0] - pts[-i - 1][0] for i in range(1, n + 1)) / n
        vy = sum(pts[-i][1] - pts[-i - 1][1] for i in range(1, n + 1)) / n
        expected = [[pts[-1][0] + k * vx, pts[-1][1] + k * vy] for k in range(1, steps + 1)]
        out = constant_velocity_extrapolate(Trajectory(pts), steps)
        np.testing.assert_allclose(out.points, expected, rtol=1e-9, atol=1e-6)

    @given(coord, coord, st.floats(-5, 5), st.floats(-5, 5), st.integers(1, 20))
    def test_linear_history_extends_line(self, x0, y0, vx, vy, steps):
        t = np.arange(8)[:, None]
        pts = np.array([x0, y0]) + t * np.array([vx, vy])
        out = constant_velocity_extrapolate(Trajectory(pts), steps).points
        expected = np.array([x0, y0]) + np.arange(8, 8 + steps)[:, None] * np.array([vx, vy])
        np.testing.assert_allclose(out, expected, atol=1e-8)

    def test_too_short(self):
        with pytest.raises(ValueError):
            constant_velocity_extrapolate(Trajectory([[0, 0]]), 3)


class TestDistances:
    def test_identical(self):
        t = Trajectory([[0, 0], [1, 1], [2, 3]])
        assert min_pairwise_distance(t, t) == 0.0

    def test_parallel_offset(self):
        xs = np.linspace(0, 5, 12)
        a = Trajectory(np.stack([xs, np.zeros(12)], axis=1))
        b = Trajectory(np.stack([xs, np.full(12, 0.3)], axis=1))
        assert min_pairwise_distance(a, b) == pytest.approx(0.3, abs=1e-12)

    def test_crossing_diagonals_brute_force(self):
        s = np.linspace(-1, 1, 7)
        a = np.stack([s, s], axis=1)
        b = np.stack([s + 0.05, -s], axis=1)
        brute = min(math.hypot(*(a[k] - b[k])) for k in range(7))
        assert min_pairwise_distance(a, b) == pytest.approx(brute, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            min_pairwise_distance(np.zeros((3, 2)), np.zeros((4, 2)))

    @given(st.integers(1, 8).flatmap(lambda n: st.tuples(arrays(np.float64, (n, 2), elements=coord),
                                                          arrays(np.float64, (n, 2), elements=coord))))
    def test_symmetric_non_negative(self, pair):
        a, b = pair
        d = min_pairwise_distance(a, b)
        assert d >= 0 and d == min_pairwise_distance(b, a)

    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_cross_matches_pairwise(self, t, ka, kb, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(ka, t, 2)), r.normal(size=(kb, t, 2))
        m = cross_min_distances(a, b)
        for i in range(ka):
            for j in range(kb):
                assert m[i, j] == min_pairwise_distance(a[i], b[j])
