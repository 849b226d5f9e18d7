import logging
import math
import queue
import struct
import threading
from collections import deque
from collections.abc import Sequence
from typing import BinaryIO, Protocol

import numpy as np
from scipy.ndimage import uniform_filter

from costmap_racer.exceptions import (
    CalibrationError,
    EndOfStream,
    InvalidInputError,
    ProtocolError,
)
from costmap_racer.models.geometry import Pose2D
from costmap_racer.models.maps import LocalPatch, PatchSpec, SchematicMap
from costmap_racer.models.sensors import CostmapFrame, DegradationParams
from costmap_racer.services.schematic_map import extract_local_patch, extract_local_patches

logger = logging.getLogger(__name__)

FRAME_MAGIC = b"CMAP"
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct("<4sIdHHf")
LENGTH_PREFIX = struct.Struct("<I")

DROPOUT_VALUE = 0.5
_EPS = 1e-9


# ============================================================================
# Synthesis
# ============================================================================


def biased_pose(pose: Pose2D, params: DegradationParams) -> Pose2D:
    """Shift a pose sideways by lateral_bias and rotate it by heading_bias."""
    return Pose2D(
        pose.p_x - params.lateral_bias * math.sin(pose.psi),
        pose.p_y + params.lateral_bias * math.cos(pose.psi),
        pose.psi + params.heading_bias,
    )


def _degrade(
    clean: np.ndarray,
    params: DegradationParams,
    noise: np.ndarray,
    dropout_draw: np.ndarray | float,
) -> np.ndarray:
    """Blur, add noise, clamp and drop out. ``clean`` is (..., H, W)."""
    values = clean
    if params.blur_radius_px > 0:
        size = [1] * (clean.ndim - 2) + [2 * params.blur_radius_px + 1] * 2
        values = uniform_filter(values, size=size, mode="nearest")
    values = np.clip(values + params.pixel_noise_sigma * noise, 0.0, 1.0)
    dropped = np.asarray(dropout_draw) < params.dropout_prob
    if values.ndim == 2:
        return np.full_like(values, DROPOUT_VALUE) if dropped else values
    values[dropped] = DROPOUT_VALUE
    return values


def synth_observe(
    schematic: SchematicMap,
    true_pose: Pose2D,
    params: DegradationParams,
    rng: np.random.Generator,
    *,
    spec: PatchSpec | None = None,
    capture_time: float = 0.0,
) -> CostmapFrame:
    """Synthesize one degraded frame showing the scene at ``capture_time``.

    The frame is stamped with its delivery time, capture_time + latency. Each
    call consumes the same number of random draws whatever the parameters.
    """
    spec = spec or PatchSpec()
    clean = extract_local_patch(schematic, biased_pose(true_pose, params), spec).values
    dropout_draw = rng.random()
    noise = rng.standard_normal(spec.shape)
    values = _degrade(clean, params, noise, dropout_draw)
    return CostmapFrame(timestamp=capture_time + params.latency, spec=spec, values=values)


def _as_values(image: CostmapFrame | LocalPatch | np.ndarray) -> np.ndarray:
    if isinstance(image, (CostmapFrame, LocalPatch)):
        return np.asarray(image.values, dtype=np.float64)
    return np.asarray(image, dtype=np.float64)


def frame_accuracy(frame: CostmapFrame | np.ndarray, truth: LocalPatch | CostmapFrame | np.ndarray) -> float:
    """A_t = 1 - mean absolute per-pixel difference."""
    a = _as_values(frame)
    b = _as_values(truth)
    if a.shape != b.shape:
        raise InvalidInputError(f"Frame shape {a.shape} does not match truth shape {b.shape}", field="truth")
    return float(1.0 - np.mean(np.abs(a - b)))


def calibrate_degradation(
    schematic: SchematicMap,
    trajectory: Sequence[Pose2D],
    target_accuracy: float,
    rng: np.random.Generator,
    *,
    base: DegradationParams | None = None,
    spec: PatchSpec | None = None,
    n_frames: int = 1000,
    tolerance: float = 0.01,
    max_iterations: int = 60,
) -> DegradationParams:
    """Bisect pixel_noise_sigma until the mean A_t over the trajectory hits the target.

    All other degradation settings are taken from ``base``. Noise and dropout
    draws are fixed up front so accuracy is monotone in sigma across iterations.
    """
    if not 0.0 <= target_accuracy <= 1.0:
        raise InvalidInputError("target_accuracy must lie in [0, 1]", field="target_accuracy")
    if not trajectory:
        raise InvalidInputError("Calibration needs at least one pose", field="trajectory")

    base = base or DegradationParams()
    spec = spec or PatchSpec()
    poses = [trajectory[i % len(trajectory)] for i in range(n_frames)]
    true_poses = np.array([[p.p_x, p.p_y, p.psi] for p in poses])
    seen_poses = np.array([[q.p_x, q.p_y, q.psi] for q in (biased_pose(p, base) for p in poses)])

    truth, _ = extract_local_patches(schematic, true_poses, spec)
    clean, _ = extract_local_patches(schematic, seen_poses, spec)
    dropout_draws = rng.random(n_frames)
    noise = rng.standard_normal(clean.shape)

    def accuracy(sigma: float) -> float:
        params = base.model_copy(update={"pixel_noise_sigma": sigma})
        frames = _degrade(clean, params, noise, dropout_draws)
        return float(1.0 - np.mean(np.abs(frames - truth)))

    def result(sigma: float, achieved: float) -> DegradationParams:
        logger.info(
            "Calibrated degradation",
            extra={"target": target_accuracy, "achieved": achieved, "sigma": sigma},
        )
        return base.model_copy(update={"pixel_noise_sigma": sigma, "target_accuracy": target_accuracy})

    best = accuracy(0.0)
    if best < target_accuracy - tolerance:
        raise CalibrationError(target_accuracy, best)
    if best <= target_accuracy + tolerance / 4:
        return result(0.0, best)

    lo, hi = 0.0, 1.0
    worst = accuracy(hi)
    while worst > target_accuracy and hi < 64.0:
        lo, hi = hi, hi * 2.0
        worst = accuracy(hi)
    if worst > target_accuracy + tolerance:
        raise CalibrationError(target_accuracy, worst)

    sigma, achieved = hi, worst
    for _ in range(max_iterations):
        sigma = 0.5 * (lo + hi)
        achieved = accuracy(sigma)
        if abs(achieved - target_accuracy) <= tolerance / 4:
            break
        if achieved > target_accuracy:
            lo = sigma
        else:
            hi = sigma
    if abs(achieved - target_accuracy) > tolerance:
        raise CalibrationError(target_accuracy, achieved)
    return result(sigma, achieved)


# ============================================================================
# Wire format
# ============================================================================


def encode_frame(frame: CostmapFrame) -> bytes:
    header = FRAME_HEADER.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        frame.timestamp,
        frame.spec.width_px,
        frame.spec.height_px,
        frame.spec.resolution,
    )
    return header + frame.values.astype("<f4").tobytes()


def decode_frame(data: bytes, *, longitudinal_offset: float = 0.0) -> CostmapFrame:
    if len(data) < FRAME_HEADER.size:
        raise ProtocolError(f"Frame header needs {FRAME_HEADER.size} bytes, got {len(data)}", offset=len(data))
    magic, version, timestamp, width, height, resolution = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"Bad frame magic {magic!r}", offset=0)
    if version != FRAME_VERSION:
        raise ProtocolError(f"Unsupported frame version {version}", offset=4)
    if width == 0 or height == 0 or not resolution > 0:
        raise ProtocolError("Frame geometry must be positive", offset=16)
    expected = FRAME_HEADER.size + width * height * 4
    if len(data) != expected:
        raise ProtocolError(f"Frame record is {len(data)} bytes, expected {expected}", offset=len(data))

    values = np.frombuffer(data, dtype="<f4", offset=FRAME_HEADER.size).reshape(height, width)
    if not np.all(np.isfinite(values)):
        raise ProtocolError("Frame values must be finite", offset=FRAME_HEADER.size)
    spec = PatchSpec(
        width_px=width,
        height_px=height,
        resolution=resolution,
        longitudinal_offset=longitudinal_offset,
    )
    return CostmapFrame(timestamp=timestamp, spec=spec, values=values)


def frame_to_stream(frame: CostmapFrame) -> bytes:
    """Length-prefixed record as sent on a byte stream."""
    record = encode_frame(frame)
    return LENGTH_PREFIX.pack(len(record)) + record


def _read_exact(reader: BinaryIO, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining > 0:
        chunk = reader.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ============================================================================
# Sources
# ============================================================================


class FrameSource(Protocol):
    def next_frame(self, t: float) -> CostmapFrame | None: ...


class SyntheticSource:
    """Frames synthesized from the simulator's true pose at a fixed cadence."""

    def __init__(
        self,
        schematic: SchematicMap,
        params: DegradationParams,
        rng: np.random.Generator,
        *,
        spec: PatchSpec | None = None,
        rate: float = 20.0,
        start_time: float = 0.0,
    ) -> None:
        if not rate > 0:
            raise InvalidInputError("rate must be positive", field="rate")
        self.schematic = schematic
        self.params = params
        self.rng = rng
        self.spec = spec or PatchSpec()
        self.rate = rate
        self.start_time = start_time
        self._tick = 0
        # enough history to cover the latency at any truth rate up to 1 kHz
        self._history: deque[tuple[float, Pose2D]] = deque(maxlen=int(params.latency * 1000) + 8)

    @property
    def next_due(self) -> float:
        return self.start_time + self._tick / self.rate

    def observe_truth(self, t: float, pose: Pose2D) -> None:
        self._history.append((t, pose))

    def _pose_at(self, t: float) -> Pose2D:
        if not self._history:
            raise InvalidInputError("No truth pose observed yet", field="pose")
        chosen = self._history[0][1]
        for stamp, pose in self._history:
            if stamp <= t + _EPS:
                chosen = pose
            else:
                break
        return chosen

    def next_frame(self, t: float) -> CostmapFrame | None:
        due = self.next_due
        if t < due - _EPS:
            return None
        # a late caller gets one frame for the latest due tick
        self._tick = max(self._tick, math.floor((t - self.start_time) * self.rate + _EPS)) + 1
        due = self.start_time + (self._tick - 1) / self.rate
        capture = due - self.params.latency
        return synth_observe(
            self.schematic,
            self._pose_at(capture),
            self.params,
            self.rng,
            spec=self.spec,
            capture_time=capture,
        )


class ReplaySource:
    """Frames from a recorded stream, released once their timestamp has passed."""

    def __init__(self, frames: Sequence[CostmapFrame]) -> None:
        self.frames = list(frames)
        self._index = 0

    @property
    def exhausted(self) -> bool:
        return self._index >= len(self.frames)

    def next_frame(self, t: float) -> CostmapFrame | None:
        if self.exhausted:
            raise EndOfStream("replay")
        frame = self.frames[self._index]
        if frame.timestamp > t + _EPS:
            return None
        self._index += 1
        return frame


class ExternalSource:
    """Frames read from an external predictor over a length-prefixed byte stream.

    A daemon reader thread performs the blocking reads and hands decoded
    frames to the consumer through a bounded queue. When the consumer falls
    behind, the oldest queued frame is discarded and counted in ``dropped``.
    """

    def __init__(self, reader: BinaryIO, *, queue_size: int = 8, name: str = "external") -> None:
        self.reader = reader
        self.name = name
        self._queue: queue.Queue[CostmapFrame | Exception] = queue.Queue(maxsize=queue_size)
        self._pending: CostmapFrame | None = None
        self.dropped = 0
        self._offset = 0
        self._thread = threading.Thread(target=self._read_loop, name=f"cmap-reader-{name}", daemon=True)
        self._thread.start()

    def _read_loop(self) -> None:
        while True:
            try:
                prefix = _read_exact(self.reader, LENGTH_PREFIX.size)
                if not prefix:
                    self._offer(EndOfStream(self.name))
                    return
                if len(prefix) < LENGTH_PREFIX.size:
                    raise ProtocolError("Truncated length prefix", offset=self._offset)
                (size,) = LENGTH_PREFIX.unpack(prefix)
                record = _read_exact(self.reader, size)
                if len(record) < size:
                    raise ProtocolError(f"Truncated frame record: expected {size} bytes", offset=self._offset)
                try:
                    frame = decode_frame(record)
                except ProtocolError as exc:
                    raise ProtocolError(exc.message, offset=self._offset + LENGTH_PREFIX.size) from exc
                self._offset += LENGTH_PREFIX.size + size
                self._offer(frame)
            except (ProtocolError, OSError, ValueError) as exc:
                logger.warning("External frame stream failed", extra={"source": self.name, "error": str(exc)})
                self._offer(exc if isinstance(exc, ProtocolError) else ProtocolError(str(exc), self._offset))
                return

    def _offer(self, item: CostmapFrame | Exception) -> None:
        """Enqueue without blocking; a full queue sheds its oldest frame."""
        while True:
            try:
                self._queue.put_nowait(item)
                return
            except queue.Full:
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    continue
                self.dropped += 1
                logger.debug("Dropped stale frame", extra={"source": self.name, "dropped": self.dropped})

    def poll(self, timeout: float | None = None) -> bool:
        """Block until a frame or error is pending; returns whether one is."""
        if self._pending is not None:
            return True
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return False
        self._stage(item)
        return True

    def _stage(self, item: CostmapFrame | Exception) -> None:
        if isinstance(item, Exception):
            raise item
        self._pending = item

    def next_frame(self, t: float) -> CostmapFrame | None:
        if self._pending is None:
            try:
                self._stage(self._queue.get_nowait())
            except queue.Empty:
                return None
        if self._pending.timestamp > t + _EPS:
            return None
        frame, self._pending = self._pending, None
        return frame

    def close(self) -> None:
        try:
            self.reader.close()
        except OSError:
            pass


def next_frame(source: FrameSource, t: float) -> CostmapFrame | None:
    return source.next_frame(t)
