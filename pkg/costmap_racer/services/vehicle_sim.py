import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from costmap_racer import kernels
from costmap_racer.exceptions import EndOfStream, InvalidInputError, ServiceError
from costmap_racer.models.control import Control, ControlSequence
from costmap_racer.models.geometry import Centerline, Pose2D
from costmap_racer.models.maps import SchematicMap
from costmap_racer.models.records import (
    ControlRecord,
    EventKind,
    EventRecord,
    PlanRecord,
    RunLog,
    RunLogHeader,
    TruthRecord,
)
from costmap_racer.models.scenario import Scenario
from costmap_racer.models.sensors import ImuSample, SensorNoiseParams, WheelSpeedSample
from costmap_racer.models.vehicle import GRAVITY, SimState, VehicleParams
from costmap_racer.services.costmap_sensor import FrameSource, SyntheticSource
from costmap_racer.services.mppi_controller import EgoFrame, MppiPlanner
from costmap_racer.services.particle_filter import ParticleFilter
from costmap_racer.services.schematic_map import query_cost
from costmap_racer.services.track import LapCounter, TrackProjector

logger = logging.getLogger(__name__)

MAX_STEP = 0.01
OFF_TRACK_COST = 1.0 - 1e-9
GATE_RELEASE = 2.0


@lru_cache(maxsize=8)
def _packed(params: VehicleParams) -> np.ndarray:
    return params.as_array()


def step(state: SimState, control: Control, params: VehicleParams, dt: float) -> SimState:
    """Advance the plant by ``dt``; the front wheel speed lags |v_x|."""
    if not 0.0 < dt <= MAX_STEP:
        raise InvalidInputError(f"dt must lie in (0, {MAX_STEP}]", field="dt")

    x, y, psi, vx, vy, r = kernels.bicycle_step(
        state.pose.p_x,
        state.pose.p_y,
        state.pose.psi,
        state.v_x,
        state.v_y,
        state.yaw_rate,
        control.steering,
        control.throttle,
        dt,
        _packed(params),
    )
    gain = min(dt / params.wheel_lag, 1.0)
    wheel = state.wheel_speed_front + (abs(vx) - state.wheel_speed_front) * gain
    return SimState(
        t=state.t + dt,
        pose=Pose2D(x, y, psi),
        v_x=vx,
        v_y=vy,
        yaw_rate=r,
        wheel_speed_front=wheel,
    )


def emit_imu(state: SimState, prev: SimState, noise: SensorNoiseParams, rng: np.random.Generator) -> ImuSample:
    """Body-frame specific force and angular rate.

    a_x = dv_x/dt - r v_y and a_y = dv_y/dt + r v_x, with the velocity
    derivatives taken by finite difference against ``prev``.
    """
    dt = state.t - prev.t
    if dt > 0:
        dvx = (state.v_x - prev.v_x) / dt
        dvy = (state.v_y - prev.v_y) / dt
    else:
        dvx = dvy = 0.0

    n = rng.standard_normal(6)
    accel = noise.accel_noise_std
    gyro = noise.gyro_noise_std
    return ImuSample(
        timestamp=state.t,
        a_x=dvx - state.yaw_rate * state.v_y + noise.accel_bias + accel * n[0],
        a_y=dvy + state.yaw_rate * state.v_x + noise.accel_bias + accel * n[1],
        a_z=GRAVITY + accel * n[2],
        alpha_x=gyro * n[3],
        alpha_y=gyro * n[4],
        alpha_z=state.yaw_rate + noise.gyro_bias + gyro * n[5],
    )


def emit_wheelspeed(state: SimState, noise: SensorNoiseParams, rng: np.random.Generator) -> WheelSpeedSample:
    measured = state.wheel_speed_front + noise.wheel_noise_std * rng.standard_normal()
    return WheelSpeedSample(timestamp=state.t, W=max(0.0, float(measured)))


def truth_record(state: SimState) -> TruthRecord:
    return TruthRecord(
        t=state.t,
        p_x=state.pose.p_x,
        p_y=state.pose.p_y,
        psi=state.pose.psi,
        v_x=state.v_x,
        v_y=state.v_y,
        yaw_rate=state.yaw_rate,
        wheel_speed_front=state.wheel_speed_front,
    )


@dataclass
class SensorSuite:
    noise: SensorNoiseParams
    rng: np.random.Generator
    frame_source: FrameSource | None = None
    planning_source: SyntheticSource | None = None


def localization_gate(localized: bool, position_std: float, threshold: float | None) -> bool:
    """Hysteresis on the estimate spread: lock at ``threshold``, release above twice that."""
    if threshold is None:
        return True
    if localized:
        return position_std <= GATE_RELEASE * threshold
    return position_std <= threshold


class _Ticks:
    def __init__(self, scenario: Scenario) -> None:
        sim_rate = scenario.rates.sim_rate
        self.sim_rate = sim_rate
        self.dt = 1.0 / sim_rate
        self.imu = round(sim_rate / scenario.rates.imu_rate)
        self.wheel = round(sim_rate / scenario.rates.wheel_rate)
        self.plan = round(sim_rate / scenario.mppi.control_rate)
        self.last = math.ceil(scenario.termination.duration * sim_rate - 1e-9)

    def time(self, k: int) -> float:
        return k / self.sim_rate


def run_closed_loop(
    schematic: SchematicMap,
    sensors: SensorSuite,
    particle_filter: ParticleFilter,
    planner: MppiPlanner,
    scenario: Scenario,
    *,
    centerline: Centerline,
    header: RunLogHeader,
) -> RunLog:
    """Drive the plant around the track on a single deterministic clock.

    Per tick: termination checks on the current state, then sensor emission
    and filtering on IMU ticks, then planning on plan ticks, then one plant
    step. Component failures end the run with a failure event.
    """
    ticks = _Ticks(scenario)
    projector = TrackProjector(centerline)
    laps = LapCounter(projector)
    target_laps = scenario.termination.laps

    log = RunLog(header)
    log.append(schematic)
    log.append(centerline)

    state = SimState(t=0.0, pose=projector.start_pose())
    prev_imu_state = state
    gyro = 0.0
    off_track = 0.0
    frames_done = sensors.frame_source is None
    estimate = None
    planning_frame = None
    latest_frame = None
    latest_wheel = 0.0
    threshold = scenario.mppi.localized_std if scenario.mppi.mode == "map" else None
    localized = threshold is None
    searcher = planner.with_weights(
        scenario.weights.model_copy(update={"speed_mode": "target", "target_speed": scenario.mppi.search_speed})
    )
    active = planner if localized else searcher
    n_events = 0
    ending: EventRecord | None = None

    def flush_filter_events() -> None:
        nonlocal n_events
        for event in particle_filter.events[n_events:]:
            log.append(event)
        n_events = len(particle_filter.events)

    for k in range(ticks.last + 1):
        t = ticks.time(k)
        pose = state.pose

        if laps.update(pose.p_x, pose.p_y):
            log.append(EventRecord(t, EventKind.LAP, f"lap {laps.laps}"))
            logger.info("Lap completed", extra={"lap": laps.laps, "t": t})
            if target_laps is not None and laps.laps >= target_laps:
                ending = EventRecord(t, EventKind.FINISHED, f"{laps.laps} laps")
                break

        if query_cost(schematic, pose.p_x, pose.p_y) >= OFF_TRACK_COST:
            off_track += ticks.dt
            if off_track > scenario.termination.crash_time:
                ending = EventRecord(t, EventKind.CRASH, f"off track for {off_track:.3f} s")
                logger.warning("Vehicle crashed", extra={"t": t, "x": pose.p_x, "y": pose.p_y})
                break
        else:
            off_track = 0.0

        try:
            if k % ticks.imu == 0:
                log.append(truth_record(state))
                if k % ticks.wheel == 0:
                    wheel = emit_wheelspeed(state, sensors.noise, sensors.rng)
                    log.append(wheel)
                    particle_filter.push_wheel(wheel)
                    latest_wheel = wheel.W

                for source in (sensors.frame_source, sensors.planning_source):
                    if isinstance(source, SyntheticSource):
                        source.observe_truth(t, pose)
                if not frames_done:
                    try:
                        while (frame := sensors.frame_source.next_frame(t)) is not None:
                            log.append(frame)
                            particle_filter.push_frame(frame)
                            latest_frame = frame
                    except EndOfStream:
                        frames_done = True

                imu = emit_imu(state, prev_imu_state, sensors.noise, sensors.rng)
                prev_imu_state = state
                gyro = imu.alpha_z
                log.append(imu)
                estimate = particle_filter.on_imu(imu)
                log.append(estimate)
                flush_filter_events()

            if k % ticks.plan == 0:
                if scenario.mppi.mode == "mapless":
                    fresh = sensors.planning_source.next_frame(t)
                    planning_frame = fresh or planning_frame
                    start = np.array([0.0, 0.0, 0.0, state.v_x, state.v_y, gyro])
                    sequence = planner.plan(t, start, EgoFrame(planning_frame))
                else:
                    now_localized = localization_gate(localized, estimate.position_std, threshold)
                    if now_localized != localized:
                        localized = now_localized
                        active = planner if localized else searcher
                        logger.info(
                            "Map planning %s",
                            "engaged" if localized else "suspended",
                            extra={"t": t, "position_std": estimate.position_std},
                        )
                    if localized:
                        start = np.array([estimate.p_x, estimate.p_y, estimate.psi, estimate.v_x, estimate.v_y, gyro])
                        sequence = planner.plan(t, start, schematic)
                    elif latest_frame is not None:
                        start = np.array([0.0, 0.0, 0.0, latest_wheel, 0.0, gyro])
                        sequence = searcher.plan(t, start, EgoFrame(latest_frame))
                    else:
                        sequence = ControlSequence.zeros(scenario.mppi.horizon, scenario.mppi.dt)
                log.append(PlanRecord(t, sequence))
                if sequence.emergency:
                    log.append(EventRecord(t, EventKind.EMERGENCY, "all rollouts infeasible"))
                control = active.control_at(t)
                log.append(ControlRecord(t, control.steering, control.throttle))

            control = active.control_at(t)
            state = replace(step(state, control, scenario.vehicle, ticks.dt), t=ticks.time(k + 1))
        except ServiceError as exc:
            logger.error("Closed loop component failed", extra=exc.context)
            ending = EventRecord(t, EventKind.FAILURE, exc.message)
            break

    if ending is None:
        t_end = ticks.time(ticks.last)
        if target_laps is None:
            ending = EventRecord(t_end, EventKind.FINISHED, "duration reached")
        else:
            ending = EventRecord(t_end, EventKind.TIMEOUT, f"{laps.laps} of {target_laps} laps")
    log.append(ending)
    return log
