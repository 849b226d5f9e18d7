import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from costmap_racer.exceptions import InvalidInputError
from costmap_racer.models.geometry import Centerline, Pose2D

# (kind, length or radius, signed turn angle in degrees; positive turns left)
SYNTHETIC_LAYOUT: tuple[tuple[str, float, float], ...] = (
    ("straight", 30.0, 0.0),
    ("arc", 8.0, 180.0),
    ("straight", 6.0, 0.0),
    ("arc", 6.0, -90.0),
    ("arc", 6.0, 90.0),
    ("straight", 12.0, 0.0),
    ("arc", 14.0, 180.0),
)


def synthetic_centerline(spacing: float = 0.25) -> Centerline:
    """Closed reference loop with a hairpin, an S-curve and a long sweeper.

    Starts at the origin heading east and closes back onto it.
    """
    if spacing <= 0:
        raise InvalidInputError("spacing must be positive", field="spacing")

    x, y, heading = 0.0, 0.0, 0.0
    points = [(x, y)]
    for kind, size, turn_deg in SYNTHETIC_LAYOUT:
        if kind == "straight":
            n = max(1, math.ceil(size / spacing))
            for k in range(1, n + 1):
                s = size * k / n
                points.append((x + s * math.cos(heading), y + s * math.sin(heading)))
            x, y = points[-1]
        else:
            sign = 1.0 if turn_deg > 0 else -1.0
            sweep = math.radians(abs(turn_deg))
            cx = x - sign * size * math.sin(heading)
            cy = y + sign * size * math.cos(heading)
            n = max(1, math.ceil(size * sweep / spacing))
            for k in range(1, n + 1):
                theta = heading + sign * sweep * k / n
                points.append((cx + sign * size * math.sin(theta), cy - sign * size * math.cos(theta)))
            heading += sign * sweep
            x, y = points[-1]

    # the last point lands back on the origin
    return Centerline(np.array(points[:-1]), closed=True)


def densify(centerline: Centerline, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Resample the polyline so consecutive samples are at most ``spacing`` apart.

    Returns (samples, arc_length) where arc_length[i] is the distance along the
    polyline to samples[i].
    """
    starts, ends = centerline.segments()
    lengths = np.hypot(*(ends - starts).T)
    counts = np.maximum(1, np.ceil(lengths / spacing).astype(np.int64))

    chunks = []
    arcs = []
    offset = 0.0
    for start, end, length, count in zip(starts, ends, lengths, counts):
        t = np.arange(count) / count
        chunks.append(start + t[:, None] * (end - start))
        arcs.append(offset + t * length)
        offset += length
    if not centerline.closed:
        chunks.append(ends[-1:])
        arcs.append(np.array([offset]))
    return np.concatenate(chunks), np.concatenate(arcs)


def centerline_poses(centerline: Centerline, spacing: float = 0.5) -> list[Pose2D]:
    """Poses along the centerline, each heading toward the next sample."""
    samples, _ = densify(centerline, spacing)
    ahead = np.roll(samples, -1, axis=0)
    if not centerline.closed:
        ahead[-1] = 2.0 * samples[-1] - samples[-2]
    headings = np.arctan2(ahead[:, 1] - samples[:, 1], ahead[:, 0] - samples[:, 0])
    return [Pose2D(float(x), float(y), float(h)) for (x, y), h in zip(samples, headings)]


@dataclass
class TrackProjector:
    """Nearest-sample projection of world points onto centerline arc length."""

    centerline: Centerline
    spacing: float = 0.05
    samples: np.ndarray = field(init=False, repr=False)
    arc_length: np.ndarray = field(init=False, repr=False)
    length: float = field(init=False)
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.samples, self.arc_length = densify(self.centerline, self.spacing)
        self.length = self.centerline.length()
        self._tree = cKDTree(self.samples)

    def project(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (arc_length, distance_from_centerline) for each point."""
        points = np.column_stack([np.atleast_1d(xs), np.atleast_1d(ys)])
        distance, index = self._tree.query(points)
        return self.arc_length[index], distance

    def project_point(self, x: float, y: float) -> float:
        s, _ = self.project(np.array([x]), np.array([y]))
        return float(s[0])

    def start_pose(self) -> Pose2D:
        first, second = self.centerline.points[0], self.centerline.points[1]
        heading = math.atan2(second[1] - first[1], second[0] - first[0])
        return Pose2D(float(first[0]), float(first[1]), heading)


@dataclass
class LapCounter:
    """Counts completed laps from unwrapped arc-length progress."""

    projector: TrackProjector
    progress: float = 0.0
    laps: int = 0
    _last_s: float | None = None

    def update(self, x: float, y: float) -> bool:
        s = self.projector.project_point(x, y)
        if self._last_s is None:
            self._last_s = s
            return False

        length = self.projector.length
        ds = (s - self._last_s + 0.5 * length) % length - 0.5 * length
        self._last_s = s
        self.progress += ds

        completed = math.floor(self.progress / length)
        if completed > self.laps:
            self.laps = completed
            return True
        return False
