import math
from dataclasses import dataclass, field

import numpy as np

from costmap_racer.exceptions import InvalidInputError

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]; angles already in range are returned unchanged."""
    if -math.pi < angle <= math.pi:
        return angle
    return math.pi - (math.pi - angle) % TWO_PI


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle."""
    angles = np.asarray(angles, dtype=np.float64)
    in_range = (angles > -np.pi) & (angles <= np.pi)
    return np.where(in_range, angles, np.pi - np.mod(np.pi - angles, TWO_PI))


@dataclass(frozen=True, slots=True)
class Pose2D:
    """Planar pose in the map frame."""

    p_x: float
    p_y: float
    psi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.p_x) and math.isfinite(self.p_y) and math.isfinite(self.psi)):
            raise InvalidInputError("Pose must be finite", field="pose")
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def translated(self, dx: float, dy: float) -> "Pose2D":
        return Pose2D(self.p_x + dx, self.p_y + dy, self.psi)


@dataclass(frozen=True, eq=False)
class Centerline:
    """Surveyed track centerline; points is an (n, 2) array in meters."""

    points: np.ndarray
    closed: bool = True
    segment_count: int = field(init=False)

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise InvalidInputError("Centerline points must be an (n, 2) array", field="waypoints")
        if len(points) < 3:
            raise InvalidInputError("Centerline needs at least 3 waypoints", field="waypoints")
        if not np.all(np.isfinite(points)):
            raise InvalidInputError("Centerline waypoints must be finite", field="waypoints")
        steps = np.diff(points, axis=0)
        if np.any(np.all(steps == 0.0, axis=1)):
            raise InvalidInputError("Consecutive centerline waypoints must be distinct", field="waypoints")
        if self.closed and np.array_equal(points[0], points[-1]):
            points = points[:-1]
            if len(points) < 3:
                raise InvalidInputError("Centerline needs at least 3 waypoints", field="waypoints")

        points.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "segment_count", len(points) if self.closed else len(points) - 1)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (starts, ends) arrays of shape (segment_count, 2)."""
        starts = self.points
        ends = np.roll(self.points, -1, axis=0)
        if not self.closed:
            starts, ends = starts[:-1], ends[:-1]
        return starts, ends

    def length(self) -> float:
        starts, ends = self.segments()
        return float(np.sum(np.hypot(*(ends - starts).T)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Centerline):
            return NotImplemented
        return self.closed == other.closed and np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]
