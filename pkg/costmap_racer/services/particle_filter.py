import logging
import math
from collections.abc import Iterable, Iterator
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from costmap_racer import kernels
from costmap_racer.exceptions import (
    DegenerateWeightsError,
    EndOfStream,
    InvalidInputError,
    InvalidMapError,
)
from costmap_racer.models.filter import (
    PSI,
    PX,
    PY,
    STATE_DIM,
    VX,
    VY,
    FilterConfig,
    KnownPosePrior,
    ParticleSet,
    ParticleState,
    StateEstimate,
    UniformOnTrackPrior,
)
from costmap_racer.models.geometry import wrap_angle, wrap_angles
from costmap_racer.models.maps import PatchSpec, SchematicMap
from costmap_racer.models.records import EventKind, EventRecord
from costmap_racer.models.sensors import CostmapFrame, ImuSample, WheelSpeedSample
from costmap_racer.services.costmap_sensor import FrameSource
from costmap_racer.services.schematic_map import patch_offsets, query_costs

logger = logging.getLogger(__name__)

_EPS = 1e-9
_MAX_REJECTION_ROUNDS = 100


def initialize(
    schematic: SchematicMap,
    prior: KnownPosePrior | UniformOnTrackPrior,
    rng: np.random.Generator,
    n_particles: int = 6400,
) -> ParticleSet:
    if n_particles < 1:
        raise InvalidInputError("n_particles must be positive", field="n_particles")

    if isinstance(prior, KnownPosePrior):
        mean = np.asarray(prior.mean, dtype=np.float64)
        states = rng.multivariate_normal(mean, prior.covariance_matrix(), size=n_particles, method="svd")
        states[:, PSI] = wrap_angles(states[:, PSI])
        return ParticleSet.uniform(states)

    return ParticleSet.uniform(_sample_on_track(schematic, rng, n_particles, prior.max_cost))


def _sample_on_track(schematic: SchematicMap, rng: np.random.Generator, n: int, max_cost: float) -> np.ndarray:
    """Positions rejection-sampled from drivable cells, headings uniform, velocities zero."""
    cells = np.flatnonzero(schematic.cost.ravel() < max_cost)
    if len(cells) == 0:
        raise InvalidMapError(f"Map has no cell with cost below {max_cost}")

    rows, cols = np.divmod(cells, schematic.width_px)
    xs = np.empty(n)
    ys = np.empty(n)
    pending = np.arange(n)
    for _ in range(_MAX_REJECTION_ROUNDS):
        pick = rng.integers(0, len(cells), size=len(pending))
        jitter = rng.random((len(pending), 2)) - 0.5
        x = schematic.origin_x + (cols[pick] + jitter[:, 0]) / schematic.resolution
        y = schematic.origin_y + (rows[pick] + jitter[:, 1]) / schematic.resolution
        costs, _ = query_costs(schematic, x, y)
        accepted = costs < max_cost
        xs[pending[accepted]] = x[accepted]
        ys[pending[accepted]] = y[accepted]
        pending = pending[~accepted]
        if len(pending) == 0:
            break
    else:
        # cell centers always satisfy the bound
        pick = rng.integers(0, len(cells), size=len(pending))
        xs[pending] = schematic.origin_x + cols[pick] / schematic.resolution
        ys[pending] = schematic.origin_y + rows[pick] / schematic.resolution

    states = np.zeros((n, STATE_DIM))
    states[:, PX] = xs
    states[:, PY] = ys
    states[:, PSI] = wrap_angles(rng.uniform(-math.pi, math.pi, size=n))
    return states


def propagate(
    particles: ParticleSet,
    imu: ImuSample,
    dt: float,
    rng: np.random.Generator,
    config: FilterConfig | None = None,
) -> ParticleSet:
    """One Euler-Maruyama step of the rigid-body motion model; weights unchanged."""
    config = config or FilterConfig()
    if not dt > 0:
        raise InvalidInputError("dt must be positive", field="dt")
    if not imu.is_finite():
        raise InvalidInputError("IMU sample contains non-finite values", field="imu")

    s = particles.states
    psi = s[:, PSI]
    vx = s[:, VX]
    vy = s[:, VY]
    cos_psi = np.cos(psi)
    sin_psi = np.sin(psi)
    dw = rng.standard_normal((particles.n, 3)) * math.sqrt(dt)

    ax = imu.a_x
    ay = imu.a_y
    if config.transport_terms:
        ax = ax + imu.alpha_z * vy
        ay = ay - imu.alpha_z * vx

    out = np.empty_like(s)
    out[:, PX] = s[:, PX] + (vx * cos_psi - vy * sin_psi) * dt
    out[:, PY] = s[:, PY] + (vx * sin_psi + vy * cos_psi) * dt
    out[:, PSI] = wrap_angles(psi + imu.alpha_z * dt + config.sigma_psi * dw[:, 0])
    out[:, VX] = vx + ax * dt + config.sigma_vx * dw[:, 1]
    out[:, VY] = vy + ay * dt + config.sigma_vy * dw[:, 2]
    return ParticleSet(out, particles.log_weights.copy(), particles.normalized)


def _forward_velocity(particle: ParticleState | np.ndarray | float) -> np.ndarray | float:
    if isinstance(particle, ParticleState):
        return particle.v_x
    if isinstance(particle, np.ndarray) and particle.ndim == 2:
        return particle[:, VX]
    return particle


def log_likelihood_wheelspeed(
    particle: ParticleState | np.ndarray | float,
    W: float,
    sigma_wheel: float = 2.5,
    exponent: str = "variance",
) -> np.ndarray | float:
    """Gaussian log-density of the wheel speed around |v_x|.

    ``exponent="printed"`` scales the squared error by 1/(2 sigma) instead of
    1/(2 sigma^2); the normalizer is unchanged.
    """
    if not W >= 0.0:
        raise InvalidInputError("Wheel speed must be non-negative", field="W")
    residual = np.abs(_forward_velocity(particle)) - W
    scale = 2.0 * sigma_wheel if exponent == "printed" else 2.0 * sigma_wheel * sigma_wheel
    result = -0.5 * math.log(2.0 * math.pi * sigma_wheel * sigma_wheel) - residual * residual / scale
    return float(result) if np.ndim(result) == 0 else result


@lru_cache(maxsize=32)
def comparison_index(frame_spec: PatchSpec, patch: PatchSpec) -> np.ndarray:
    """Flat frame-pixel index nearest to each comparison-patch pixel center, -1 if none."""
    forward, left = patch_offsets(patch)
    row = np.floor(
        frame_spec.height_px - 0.5 - (forward - frame_spec.longitudinal_offset) * frame_spec.resolution + 0.5
    ).astype(np.int64)
    col = np.floor(frame_spec.width_px // 2 - left * frame_spec.resolution + 0.5).astype(np.int64)
    inside = (row >= 0) & (row < frame_spec.height_px) & (col >= 0) & (col < frame_spec.width_px)
    index = np.where(inside, row * frame_spec.width_px + col, -1)
    index.flags.writeable = False
    return index


def comparison_observation(frame: CostmapFrame, patch: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Resample a frame onto the comparison patch grid by nearest pixel."""
    index = comparison_index(frame.spec, patch)
    valid = index >= 0
    observed = np.zeros(len(index))
    observed[valid] = frame.values.ravel()[index[valid]]
    return observed, valid


def costmap_log_likelihoods(
    states: np.ndarray,
    frame: CostmapFrame,
    schematic: SchematicMap,
    lam: float,
    patch: PatchSpec | None = None,
) -> np.ndarray:
    """log(lam) - lam * MAE for every row of ``states``."""
    if not lam > 0:
        raise InvalidInputError("lambda must be positive", field="lambda_costmap")
    patch = patch or PatchSpec.comparison()
    observed, valid = comparison_observation(frame, patch)
    forward, left = patch_offsets(patch)
    poses = kernels.as_contiguous(np.atleast_2d(states)[:, :3])
    mae = np.empty(len(poses))
    kernels.patch_mae(
        schematic.cost,
        schematic.origin_x,
        schematic.origin_y,
        schematic.resolution,
        poses,
        forward,
        left,
        observed,
        valid,
        mae,
    )
    return math.log(lam) - lam * mae


def log_likelihood_costmap(
    particle: ParticleState,
    frame: CostmapFrame,
    schematic: SchematicMap,
    lam: float = 8.0,
    patch: PatchSpec | None = None,
) -> float:
    return float(costmap_log_likelihoods(particle.as_array()[None], frame, schematic, lam, patch)[0])


def measurement_update(
    particles: ParticleSet,
    frame: CostmapFrame | None,
    wheel: WheelSpeedSample | None,
    schematic: SchematicMap,
    config: FilterConfig,
    *,
    timestamp: float | None = None,
) -> ParticleSet:
    if frame is None and wheel is None:
        raise InvalidInputError("measurement_update needs a frame or a wheel sample", field="measurement")

    increment = np.zeros(particles.n)
    if wheel is not None and config.use_wheel:
        increment += log_likelihood_wheelspeed(
            particles.states, wheel.W, config.sigma_wheel, config.wheel_exponent
        )
    if frame is not None and config.use_costmap:
        costmap = costmap_log_likelihoods(particles.states, frame, schematic, config.lambda_costmap, config.patch)
        if config.collapse_mae is not None:
            best_mae = (math.log(config.lambda_costmap) - costmap.max()) / config.lambda_costmap
            if best_mae > config.collapse_mae:
                raise DegenerateWeightsError(
                    f"No particle matches the frame (best patch error {best_mae:.3f})", timestamp=timestamp
                )
        increment += costmap

    log_weights = particles.log_weights + increment
    norm = logsumexp(log_weights)
    if not np.isfinite(norm):
        raise DegenerateWeightsError(timestamp=timestamp)
    return ParticleSet(particles.states.copy(), log_weights - norm, normalized=True)


def resample(particles: ParticleSet, rng: np.random.Generator, method: str = "systematic") -> ParticleSet:
    """Low-variance resampling by default; output weights are uniform."""
    weights = particles.weights()
    total = weights.sum()
    if not particles.normalized or not abs(total - 1.0) <= 1e-6:
        raise InvalidInputError("resample requires normalized weights", field="log_weights")

    n = particles.n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    if method == "systematic":
        positions = (rng.random() + np.arange(n)) / n
    elif method == "stratified":
        positions = (rng.random(n) + np.arange(n)) / n
    elif method == "multinomial":
        positions = np.sort(rng.random(n))
    else:
        raise InvalidInputError(f"unknown resampling method {method!r}", field="resampling")

    index = np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)
    return ParticleSet.uniform(particles.states[index].copy())


def effective_sample_size(particles: ParticleSet) -> float:
    weights = particles.weights()
    return float(1.0 / np.sum(weights * weights))


def estimate(particles: ParticleSet, timestamp: float = 0.0) -> StateEstimate:
    """Weighted mean with a circular heading mean."""
    w = particles.weights()
    s = particles.states
    px = float(w @ s[:, PX])
    py = float(w @ s[:, PY])
    psi = math.atan2(float(w @ np.sin(s[:, PSI])), float(w @ np.cos(s[:, PSI])))
    spread = (s[:, PX] - px) ** 2 + (s[:, PY] - py) ** 2
    return StateEstimate(
        timestamp=timestamp,
        p_x=px,
        p_y=py,
        psi=wrap_angle(psi),
        v_x=float(w @ s[:, VX]),
        v_y=float(w @ s[:, VY]),
        position_std=math.sqrt(max(float(w @ spread), 0.0)),
        ess=float(1.0 / np.sum(w * w)),
    )


class ParticleFilter:
    """Event loop around one ParticleSet.

    Wheel and frame data are buffered as they arrive; every IMU sample drives
    one propagation, with measurement and resampling on fixed sub-multiples of
    the propagation count.
    """

    def __init__(
        self,
        schematic: SchematicMap,
        config: FilterConfig,
        rng: np.random.Generator,
        prior: KnownPosePrior | UniformOnTrackPrior,
        *,
        events: list[EventRecord] | None = None,
    ) -> None:
        self.schematic = schematic
        self.config = config
        self.rng = rng
        self.particles = initialize(schematic, prior, rng, config.n_particles)
        self.events = events if events is not None else []

        self.n_propagations = 0
        self.n_updates = 0
        self.n_resamples = 0
        self._last_time: float | None = None
        self._wheel: WheelSpeedSample | None = None
        self._frame: CostmapFrame | None = None

    def push_wheel(self, sample: WheelSpeedSample) -> None:
        self._wheel = sample

    def push_frame(self, frame: CostmapFrame) -> None:
        if self.config.use_costmap:
            self._frame = frame

    def on_imu(self, imu: ImuSample) -> StateEstimate:
        t = imu.timestamp
        if self._last_time is None:
            dt = 1.0 / self.config.propagate_rate
        else:
            dt = t - self._last_time
        if not dt > 0:
            raise InvalidInputError("IMU timestamps must be strictly increasing", field="timestamp")
        self._last_time = t

        self.particles = propagate(self.particles, imu, dt, self.rng, self.config)
        step = self.n_propagations
        self.n_propagations += 1

        if step % self.config.steps_per_measurement == 0:
            self._measure(t)
        if step % self.config.steps_per_resample == 0:
            self._maybe_resample()
        return estimate(self.particles, t)

    def _measure(self, t: float) -> None:
        frame, wheel = self._frame, self._wheel
        if frame is None and wheel is None:
            return
        self._frame = None
        self._wheel = None
        try:
            self.particles = measurement_update(
                self.particles, frame, wheel, self.schematic, self.config, timestamp=t
            )
            self.n_updates += 1
        except DegenerateWeightsError as exc:
            logger.warning("Particle filter diverged, reinitializing", extra=exc.context)
            self.events.append(EventRecord(t, EventKind.DIVERGENCE, exc.message))
            self.particles = initialize(self.schematic, UniformOnTrackPrior(), self.rng, self.config.n_particles)
            self.events.append(EventRecord(t, EventKind.REINIT, "uniform-on-track"))

    def _maybe_resample(self) -> None:
        if self.config.resample_schedule == "adaptive":
            if effective_sample_size(self.particles) >= self.config.ess_fraction * self.particles.n:
                return
        self.particles = resample(self.particles, self.rng, self.config.resampling)
        self.n_resamples += 1


def run_filter(
    imu_stream: Iterable[ImuSample],
    wheel_stream: Iterable[WheelSpeedSample],
    frame_source: FrameSource | None,
    schematic: SchematicMap,
    config: FilterConfig,
    rng: np.random.Generator,
    prior: KnownPosePrior | UniformOnTrackPrior,
    *,
    events: list[EventRecord] | None = None,
) -> Iterator[StateEstimate]:
    """Yield one estimate per IMU sample.

    Wheel samples and frames stamped at or before an IMU sample are handed to
    the filter before that sample is processed.
    """
    particle_filter = ParticleFilter(schematic, config, rng, prior, events=events)
    wheels = iter(wheel_stream)
    pending_wheel = next(wheels, None)
    frames_done = frame_source is None

    for imu in imu_stream:
        while pending_wheel is not None and pending_wheel.timestamp <= imu.timestamp + _EPS:
            particle_filter.push_wheel(pending_wheel)
            pending_wheel = next(wheels, None)
        if not frames_done:
            try:
                while (frame := frame_source.next_frame(imu.timestamp)) is not None:
                    particle_filter.push_frame(frame)
            except EndOfStream:
                frames_done = True
        yield particle_filter.on_imu(imu)
