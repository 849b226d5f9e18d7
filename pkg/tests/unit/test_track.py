import math

import numpy as np
import pytest

from costmap_racer.exceptions import InvalidInputError
from costmap_racer.models.geometry import Centerline
from costmap_racer.services.track import (
    LapCounter,
    TrackProjector,
    centerline_poses,
    densify,
    synthetic_centerline,
)


@pytest.mark.unit
class TestSyntheticCenterline:
    def test_length_matches_layout(self, synthetic_track: Centerline):
        """Straights total 48 m and the arcs add up to 28 pi m."""
        assert synthetic_track.length() == pytest.approx(48.0 + 28.0 * math.pi, abs=0.05)

    def test_bounding_box(self, synthetic_track: Centerline):
        lower = synthetic_track.points.min(axis=0)
        upper = synthetic_track.points.max(axis=0)
        np.testing.assert_allclose(lower, [-14.0, 0.0], atol=0.01)
        np.testing.assert_allclose(upper, [38.0, 28.0], atol=0.01)

    def test_starts_at_origin_heading_east(self, synthetic_track: Centerline):
        start = TrackProjector(synthetic_track).start_pose()
        assert (start.p_x, start.p_y, start.psi) == (0.0, 0.0, 0.0)

    def test_closed_without_repeated_point(self, synthetic_track: Centerline):
        assert synthetic_track.closed
        assert not np.allclose(synthetic_track.points[0], synthetic_track.points[-1])

    def test_spacing_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            synthetic_centerline(spacing=0.0)


@pytest.mark.unit
class TestDensify:
    def test_samples_respect_spacing(self, rectangle_centerline: Centerline):
        samples, arc = densify(rectangle_centerline, 0.3)
        steps = np.hypot(*np.diff(samples, axis=0).T)
        assert steps.max() <= 0.3 + 1e-12
        assert arc[0] == 0.0
        assert np.all(np.diff(arc) > 0)
        assert arc[-1] < rectangle_centerline.length()

    def test_open_polyline_keeps_last_point(self):
        centerline = Centerline(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]), closed=False)
        samples, arc = densify(centerline, 0.5)
        np.testing.assert_array_equal(samples[-1], [1.0, 1.0])
        assert arc[-1] == pytest.approx(2.0)


@pytest.mark.unit
class TestProjection:
    def test_projects_onto_arc_length(self, rectangle_centerline: Centerline):
        projector = TrackProjector(rectangle_centerline)
        s, d = projector.project(np.array([10.0, 20.5, 10.0]), np.array([0.0, 5.0, 10.4]))
        np.testing.assert_allclose(s, [10.0, 25.0, 40.0], atol=0.05)
        np.testing.assert_allclose(d, [0.0, 0.5, 0.4], atol=0.05)

    def test_centerline_poses_head_along_track(self, rectangle_centerline: Centerline):
        """Poses along the bottom edge face east and along the right edge face north."""
        poses = centerline_poses(rectangle_centerline, spacing=0.5)
        assert poses[0].psi == pytest.approx(0.0)
        on_right_edge = [p for p in poses if p.p_x == pytest.approx(20.0) and 1.0 < p.p_y < 9.0]
        assert on_right_edge
        assert all(p.psi == pytest.approx(math.pi / 2) for p in on_right_edge)


@pytest.mark.unit
class TestLapCounter:
    def test_one_lap_counted_once(self, rectangle_centerline: Centerline):
        """Driving the loop once plus a little completes exactly one lap."""
        counter = LapCounter(TrackProjector(rectangle_centerline))
        poses = centerline_poses(rectangle_centerline, spacing=0.5)
        completions = [counter.update(p.p_x, p.p_y) for p in [*poses, *poses[:6]]]
        assert counter.laps == 1
        assert sum(completions) == 1

    def test_reversing_does_not_count(self, rectangle_centerline: Centerline):
        """Backing over the start line and forward again never completes a lap."""
        counter = LapCounter(TrackProjector(rectangle_centerline))
        for x in [*np.linspace(2.0, 0.0, 5), *np.linspace(0.0, 3.0, 7)]:
            counter.update(float(x), 0.0)
        assert counter.laps == 0
