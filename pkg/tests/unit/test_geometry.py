import math

import numpy as np
import pytest

from costmap_racer.exceptions import InvalidInputError
from costmap_racer.models.geometry import Centerline, Pose2D, wrap_angle, wrap_angles


@pytest.mark.unit
class TestWrapAngle:
    def test_in_range_angle_unchanged(self):
        """Angles already in (-pi, pi] come back bit-identical."""
        for angle in (0.0, 1.234567, -3.0, math.pi):
            assert wrap_angle(angle) == angle

    def test_wraps_into_half_open_interval(self):
        """-pi maps to pi and multiples of 2 pi are removed."""
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_angle(0.5 + 4 * math.pi) == pytest.approx(0.5)

    def test_vectorized_matches_scalar(self):
        """wrap_angles agrees with wrap_angle element by element."""
        angles = np.array([-7.0, -math.pi, -1.0, 0.0, 2.0, math.pi, 9.5])
        expected = [wrap_angle(a) for a in angles]
        np.testing.assert_allclose(wrap_angles(angles), expected)


@pytest.mark.unit
class TestPose2D:
    def test_heading_is_wrapped(self):
        """Constructing a pose wraps its heading."""
        assert Pose2D(0.0, 0.0, 2 * math.pi + 0.25).psi == pytest.approx(0.25)

    def test_non_finite_pose_rejected(self):
        """NaN or infinite coordinates raise InvalidInputError."""
        with pytest.raises(InvalidInputError):
            Pose2D(float("nan"), 0.0, 0.0)
        with pytest.raises(InvalidInputError):
            Pose2D(0.0, float("inf"), 0.0)

    def test_translated(self):
        pose = Pose2D(1.0, 2.0, 0.3).translated(0.5, -1.0)
        assert (pose.p_x, pose.p_y, pose.psi) == (1.5, 1.0, 0.3)


@pytest.mark.unit
class TestCenterline:
    def test_closed_loop_length_includes_closing_segment(self, rectangle_centerline: Centerline):
        """A closed rectangle's length is its perimeter."""
        assert rectangle_centerline.length() == pytest.approx(60.0)
        assert rectangle_centerline.segment_count == 4

    def test_open_polyline_length(self):
        centerline = Centerline(np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]]), closed=False)
        assert centerline.length() == pytest.approx(7.0)
        assert centerline.segment_count == 2

    def test_repeated_closing_point_dropped(self):
        """A closed loop given with its first point repeated at the end stores it once."""
        centerline = Centerline(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]), closed=True)
        assert len(centerline.points) == 3

    @pytest.mark.parametrize(
        "points",
        [
            [[0.0, 0.0], [1.0, 0.0]],
            [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [2.0, 1.0]],
            [[0.0, 0.0], [1.0, float("nan")], [2.0, 1.0]],
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 1.0, 0.0]],
        ],
        ids=["too-few", "duplicate", "non-finite", "wrong-shape"],
    )
    def test_invalid_waypoints_rejected(self, points):
        """Malformed waypoint arrays raise InvalidInputError on the waypoints field."""
        with pytest.raises(InvalidInputError) as exc_info:
            Centerline(np.array(points))
        assert exc_info.value.field == "waypoints"

    def test_points_are_read_only(self, rectangle_centerline: Centerline):
        with pytest.raises(ValueError):
            rectangle_centerline.points[0, 0] = 5.0
