import logging
import math
import struct
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from costmap_racer import kernels
from costmap_racer.exceptions import InvalidInputError, MapFormatError, TruncatedPayloadError
from costmap_racer.models.geometry import Centerline, Pose2D
from costmap_racer.models.maps import LocalPatch, PatchSpec, SchematicMap
from costmap_racer.services.track import densify

logger = logging.getLogger(__name__)

MAP_MAGIC = b"SMAP"
MAP_FORMAT_VERSION = 1
MAP_HEADER = struct.Struct("<4sIIIffff")

_PAIR_BUDGET = 1 << 21


def _f32(value: float) -> float:
    return float(np.float32(value))


def _segment_distance(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the nearest of the given segments."""
    ab = ends - starts
    len2 = np.sum(ab * ab, axis=1)
    seg_len = np.sqrt(len2)
    chunk = max(1, _PAIR_BUDGET // max(1, len(starts)))

    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        p = points[lo : lo + chunk]
        ap = p[:, None, :] - starts[None, :, :]
        t = np.sum(ap * ab[None], axis=2) / len2
        clamped = np.clip(t, 0.0, 1.0)
        diff = ap - clamped[..., None] * ab[None]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        # perpendicular distance is exact zero for points on the segment
        cross = ab[None, :, 0] * ap[..., 1] - ab[None, :, 1] * ap[..., 0]
        interior = (t > 0.0) & (t < 1.0)
        dist = np.where(interior, np.abs(cross) / seg_len[None], dist)
        out[lo : lo + chunk] = dist.min(axis=1)
    return out


def build_map(
    centerline: Centerline,
    resolution: float = 15.0,
    track_halfwidth: float = 2.0,
    extent_margin: float = 3.0,
    *,
    ramp_exponent: float = 1.0,
    method: Literal["exact", "kdtree"] = "exact",
) -> SchematicMap:
    """Rasterize the distance transform of a centerline.

    cost = clamp(distance / track_halfwidth, 0, 1) ** ramp_exponent. Header
    floats are rounded to single precision up front so the map survives a
    save/load round trip unchanged.
    """
    if not resolution > 0:
        raise InvalidInputError("resolution must be positive", field="resolution")
    if not track_halfwidth > 0:
        raise InvalidInputError("track_halfwidth must be positive", field="track_halfwidth")
    if not extent_margin >= 0:
        raise InvalidInputError("extent_margin must be non-negative", field="extent_margin")
    if not ramp_exponent > 0:
        raise InvalidInputError("ramp_exponent must be positive", field="ramp_exponent")

    resolution = _f32(resolution)
    track_halfwidth = _f32(track_halfwidth)

    lower = centerline.points.min(axis=0) - extent_margin
    upper = centerline.points.max(axis=0) + extent_margin
    origin_x, origin_y = _f32(lower[0]), _f32(lower[1])
    width = int(math.ceil((upper[0] - origin_x) * resolution)) + 1
    height = int(math.ceil((upper[1] - origin_y) * resolution)) + 1

    xs = origin_x + np.arange(width) / resolution
    ys = origin_y + np.arange(height) / resolution
    gx, gy = np.meshgrid(xs, ys)
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    # samples at most `spacing` apart bound the true distance from below by d_sample - spacing / 2
    spacing = 0.1 / resolution
    samples, _ = densify(centerline, spacing)
    approx, _ = cKDTree(samples).query(centers)

    if method == "kdtree":
        distance = approx
    elif method == "exact":
        distance = np.full(len(centers), np.inf)
        near = approx - 0.5 * spacing < track_halfwidth
        starts, ends = centerline.segments()
        distance[near] = _segment_distance(centers[near], starts, ends)
    else:
        raise InvalidInputError(f"unknown distance method {method!r}", field="method")

    cost = np.clip(distance / track_halfwidth, 0.0, 1.0) ** ramp_exponent
    logger.debug(
        "Built schematic map",
        extra={"width_px": width, "height_px": height, "resolution": resolution, "method": method},
    )
    return SchematicMap(
        width_px=width,
        height_px=height,
        resolution=resolution,
        origin_x=origin_x,
        origin_y=origin_y,
        track_halfwidth=track_halfwidth,
        cost=cost.reshape(height, width).astype(np.float32),
    )


def query_cost(schematic: SchematicMap, x: float, y: float) -> float:
    """Bilinear cost at a world point; 1 outside the map."""
    value, _ = kernels.sample_cell(
        schematic.cost,
        (y - schematic.origin_y) * schematic.resolution,
        (x - schematic.origin_x) * schematic.resolution,
    )
    return value


def query_costs(schematic: SchematicMap, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    rows = kernels.as_contiguous(((ys - schematic.origin_y) * schematic.resolution).ravel())
    cols = kernels.as_contiguous(((xs - schematic.origin_x) * schematic.resolution).ravel())
    return sample_grid(schematic.cost, rows, cols, xs.shape)


def sample_grid(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, ...]):
    values = np.empty(rows.size)
    valid = np.empty(rows.size, dtype=np.bool_)
    kernels.sample_cells(grid, rows, cols, values, valid)
    return values.reshape(shape), valid.reshape(shape)


@lru_cache(maxsize=32)
def patch_offsets(spec: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle-frame (forward, left) offsets of every pixel center, row-major."""
    v, u = np.mgrid[0 : spec.height_px, 0 : spec.width_px]
    forward = spec.longitudinal_offset + (spec.height_px - v - 0.5) / spec.resolution
    left = (spec.width_px // 2 - u) / spec.resolution
    forward = np.ascontiguousarray(forward.ravel(), dtype=np.float64)
    left = np.ascontiguousarray(left.ravel(), dtype=np.float64)
    forward.flags.writeable = False
    left.flags.writeable = False
    return forward, left


def extract_local_patches(
    schematic: SchematicMap, poses: np.ndarray, spec: PatchSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Batched extraction; poses is (N, >=3). Returns values and validity of shape (N, H, W)."""
    poses = kernels.as_contiguous(np.atleast_2d(poses))
    forward, left = patch_offsets(spec)
    n = len(poses)
    values = np.empty((n, spec.size))
    valid = np.empty((n, spec.size), dtype=np.bool_)
    kernels.sample_patches(
        schematic.cost,
        schematic.origin_x,
        schematic.origin_y,
        schematic.resolution,
        poses,
        forward,
        left,
        values,
        valid,
    )
    return values.reshape(n, *spec.shape), valid.reshape(n, *spec.shape)


def extract_local_patch(schematic: SchematicMap, pose: Pose2D, spec: PatchSpec) -> LocalPatch:
    values, valid = extract_local_patches(schematic, np.array([[pose.p_x, pose.p_y, pose.psi]]), spec)
    return LocalPatch(spec=spec, values=values[0], validity=valid[0])


def encode_map(schematic: SchematicMap) -> bytes:
    header = MAP_HEADER.pack(
        MAP_MAGIC,
        MAP_FORMAT_VERSION,
        schematic.width_px,
        schematic.height_px,
        schematic.resolution,
        schematic.origin_x,
        schematic.origin_y,
        schematic.track_halfwidth,
    )
    return header + schematic.cost.astype("<f4").tobytes()


def decode_map(data: bytes) -> SchematicMap:
    if len(data) < MAP_HEADER.size:
        raise MapFormatError(f"Map header needs {MAP_HEADER.size} bytes, got {len(data)}", offset=len(data))

    magic, version, width, height, resolution, origin_x, origin_y, halfwidth = MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"Bad map magic {magic!r}", offset=0)
    if version != MAP_FORMAT_VERSION:
        raise MapFormatError(f"Unsupported map version {version}", offset=4)
    if width == 0 or height == 0:
        raise MapFormatError("Map dimensions must be positive", offset=8)
    if not (resolution > 0 and halfwidth > 0):
        raise MapFormatError("Map resolution and halfwidth must be positive", offset=16)

    expected = width * height * 4
    payload = data[MAP_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(expected=expected, actual=len(payload))
    if len(payload) > expected:
        raise MapFormatError("Trailing bytes after map payload", offset=MAP_HEADER.size + expected)

    cost = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    if not (np.all(cost >= 0.0) and np.all(cost <= 1.0)):
        raise MapFormatError("Map cost values must lie in [0, 1]", offset=MAP_HEADER.size)

    return SchematicMap(
        width_px=width,
        height_px=height,
        resolution=resolution,
        origin_x=origin_x,
        origin_y=origin_y,
        track_halfwidth=halfwidth,
        cost=cost.astype(np.float32),
    )


def save_map(schematic: SchematicMap, path: Path) -> None:
    Path(path).write_bytes(encode_map(schematic))


def load_map(path: Path) -> SchematicMap:
    return decode_map(Path(path).read_bytes())


def load_centerline(path: Path, closed: bool = True) -> Centerline:
    """Read a plain-text centerline, one ``x y`` pair per line."""
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise InvalidInputError(f"Cannot parse centerline file {path}: {exc}", field="centerline") from exc
    return Centerline(points, closed=closed)


def save_centerline(centerline: Centerline, path: Path) -> None:
    np.savetxt(path, centerline.points, fmt="%.6f")
