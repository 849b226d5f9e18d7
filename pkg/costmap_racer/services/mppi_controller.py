import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Protocol, Union

import numpy as np

from costmap_racer import kernels
from costmap_racer.exceptions import InvalidInputError
from costmap_racer.models.control import (
    CONTROL_HIGH,
    CONTROL_LOW,
    Control,
    ControlSequence,
    CostWeights,
    MppiConfig,
)
from costmap_racer.models.geometry import Pose2D
from costmap_racer.models.maps import SchematicMap
from costmap_racer.models.sensors import CostmapFrame
from costmap_racer.models.vehicle import SimState, VehicleParams
from costmap_racer.services.schematic_map import query_costs, sample_grid

logger = logging.getLogger(__name__)

# rollout state columns
SX, SY, SPSI, SVX, SVY, SR = range(6)
SLIP_SPEED_FLOOR = 0.1


class DynamicsModel(Protocol):
    """Batched, deterministic state transition over (K, 6) states and (K, 2) controls."""

    def propagate(self, states: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray: ...


class BicycleDynamics:
    def __init__(self, params: VehicleParams | None = None) -> None:
        self.params = params or VehicleParams()
        self._packed = self.params.as_array()

    def propagate(self, states: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
        single = np.ndim(states) == 1
        states = kernels.as_contiguous(np.atleast_2d(states))
        controls = kernels.as_contiguous(np.broadcast_to(np.atleast_2d(controls), (len(states), 2)))
        out = np.empty_like(states)
        kernels.bicycle_batch(states, controls, dt, self._packed, out)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class EgoFrame:
    """A cost frame anchored at the pose it was captured from."""

    frame: CostmapFrame
    pose: Pose2D = field(default_factory=lambda: Pose2D(0.0, 0.0, 0.0))


CostSource = Union[SchematicMap, CostmapFrame, EgoFrame]


def mapless_cost_lookup(
    frame: CostmapFrame,
    x: float | np.ndarray,
    y: float | np.ndarray,
    frame_pose: Pose2D | None = None,
) -> float | np.ndarray:
    """Cost of world points read off an egocentric frame; 1 outside the frame."""
    pose = frame_pose or Pose2D(0.0, 0.0, 0.0)
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    dx = x - pose.p_x
    dy = y - pose.p_y
    c = math.cos(pose.psi)
    s = math.sin(pose.psi)
    forward = c * dx + s * dy
    left = -s * dx + c * dy

    spec = frame.spec
    rows = spec.height_px - 0.5 - (forward - spec.longitudinal_offset) * spec.resolution
    cols = spec.width_px // 2 - left * spec.resolution
    values, _ = sample_grid(
        frame.values,
        kernels.as_contiguous(rows.ravel()),
        kernels.as_contiguous(cols.ravel()),
        x.shape,
    )
    return float(values) if values.ndim == 0 else values


def positional_costs(source: CostSource, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """C_M for a batch of positions."""
    if isinstance(source, SchematicMap):
        values, _ = query_costs(source, xs, ys)
        return values
    if isinstance(source, EgoFrame):
        return np.asarray(mapless_cost_lookup(source.frame, xs, ys, source.pose))
    if isinstance(source, CostmapFrame):
        return np.asarray(mapless_cost_lookup(source, xs, ys))
    raise InvalidInputError(f"Unsupported cost source {type(source).__name__}", field="cost_source")


def running_costs(
    states: np.ndarray,
    t: np.ndarray | int,
    source: CostSource,
    weights: CostWeights,
) -> np.ndarray:
    """Running cost for states of shape (..., 6); ``t`` broadcasts against states[..., 0]."""
    cm = positional_costs(source, states[..., SX], states[..., SY])
    vx = states[..., SVX]
    vy = states[..., SVY]
    yaw_rate = states[..., SR]

    speed_error = vx - weights.desired_speed
    h = speed_error * speed_error if weights.speed_mode == "target" else np.abs(speed_error)
    indicator = ((cm > weights.c_max) | (np.abs(yaw_rate) > weights.r_max)).astype(np.float64)
    slip = vy / np.maximum(np.abs(vx), SLIP_SPEED_FLOOR)

    return (
        weights.track * cm
        + weights.speed * h
        + weights.indicator * np.power(weights.decay, t) * indicator
        + weights.slip * slip * slip
    )


def running_cost(state: SimState | np.ndarray, t: int, source: CostSource, weights: CostWeights) -> float:
    array = state.as_array() if isinstance(state, SimState) else np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InvalidInputError("State must be finite", field="state")
    return float(running_costs(array[None], np.array([t]), source, weights)[0])


def rollout(
    model: DynamicsModel,
    start_state: np.ndarray,
    sequence: ControlSequence,
    source: CostSource,
    weights: CostWeights,
) -> tuple[np.ndarray, float]:
    """Propagate one sequence; returns the (T, 6) trajectory and its total cost."""
    samples = sequence.controls[None]
    trajectories, costs = rollout_batch(model, start_state, samples, sequence.dt, source, weights)
    return trajectories[:, 0], float(costs[0])


def rollout_batch(
    model: DynamicsModel,
    start_state: np.ndarray,
    samples: np.ndarray,
    dt: float,
    source: CostSource,
    weights: CostWeights,
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate (K, T, 2) control samples from one start state.

    Costs are charged on the state reached after each control. Rollouts that
    leave the finite range cost +inf.
    """
    n_samples, horizon = samples.shape[:2]
    states = np.repeat(np.asarray(start_state, dtype=np.float64)[None], n_samples, axis=0)
    trajectories = np.empty((horizon, n_samples, 6))
    for step in range(horizon):
        states = model.propagate(states, samples[:, step], dt)
        trajectories[step] = states

    with np.errstate(invalid="ignore", over="ignore"):
        finite = np.all(np.isfinite(trajectories), axis=(0, 2))
        costs = running_costs(trajectories, np.arange(horizon)[:, None], source, weights).sum(axis=0)
    return trajectories, np.where(finite, costs, np.inf)


def importance_weights(costs: np.ndarray, temperature: float) -> np.ndarray | None:
    """exp(-(S - min S) / temperature), normalized; None when every cost is infinite."""
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive", field="temperature")
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        return None
    with np.errstate(over="ignore", under="ignore"):
        shifted = (costs - costs[finite].min()) / temperature
        weights = np.where(finite, np.exp(-np.where(finite, shifted, 0.0)), 0.0)
    return weights / weights.sum()


def path_integral_update(
    nominal: np.ndarray,
    noise_std: float | np.ndarray,
    evaluate: Callable[[np.ndarray], np.ndarray],
    temperature: float,
    rng: np.random.Generator,
    n_samples: int,
    bounds: tuple[float, float] | None = (CONTROL_LOW, CONTROL_HIGH),
) -> np.ndarray | None:
    """Perturb ``nominal``, score every sample and return the cost-weighted average."""
    nominal = np.asarray(nominal, dtype=np.float64)
    noise = rng.standard_normal((n_samples, *nominal.shape)) * np.asarray(noise_std, dtype=np.float64)
    samples = nominal[None] + noise
    if bounds is not None:
        samples = np.clip(samples, *bounds)

    weights = importance_weights(evaluate(samples), temperature)
    if weights is None:
        return None
    average = np.tensordot(weights, samples, axes=1)
    if bounds is not None:
        average = np.clip(average, *bounds)
    return average


def compute_control(
    state: SimState | np.ndarray,
    previous: ControlSequence,
    config: MppiConfig,
    weights: CostWeights,
    rng: np.random.Generator,
    *,
    model: DynamicsModel,
    source: CostSource,
) -> ControlSequence:
    if previous.horizon != config.horizon:
        raise InvalidInputError(
            f"Previous sequence has {previous.horizon} steps, expected {config.horizon}",
            field="previous",
        )
    start = state.as_array() if isinstance(state, SimState) else np.asarray(state, dtype=np.float64)

    def evaluate(samples: np.ndarray) -> np.ndarray:
        _, costs = rollout_batch(model, start, samples, config.dt, source, weights)
        return costs

    average = path_integral_update(
        previous.controls,
        np.asarray(config.noise_std),
        evaluate,
        config.temperature,
        rng,
        config.n_samples,
    )
    if average is None:
        logger.warning("Every rollout infeasible, issuing emergency stop")
        return ControlSequence.zeros(config.horizon, config.dt, emergency=True)
    return ControlSequence(config.dt, average)


class MppiPlanner:
    """Receding-horizon wrapper: shifts the last plan by elapsed steps before replanning."""

    def __init__(
        self,
        config: MppiConfig,
        weights: CostWeights,
        model: DynamicsModel,
        rng: np.random.Generator,
    ) -> None:
        self.config = config
        self.weights = weights
        self.model = model
        self.rng = rng
        self.sequence = ControlSequence.zeros(config.horizon, config.dt)
        self.plan_time: float | None = None
        self.emergencies = 0

    def with_weights(self, weights: CostWeights) -> "MppiPlanner":
        """A fresh planner on the same model and random stream."""
        return MppiPlanner(self.config, weights, self.model, self.rng)

    def plan(self, t: float, state: SimState | np.ndarray, source: CostSource) -> ControlSequence:
        previous = self.sequence
        if self.plan_time is not None:
            previous = previous.shifted(round((t - self.plan_time) / self.config.dt))
        self.sequence = compute_control(
            state,
            previous,
            self.config,
            self.weights,
            self.rng,
            model=self.model,
            source=source,
        )
        self.plan_time = t
        if self.sequence.emergency:
            self.emergencies += 1
        return self.sequence

    def control_at(self, t: float) -> Control:
        if self.plan_time is None:
            return Control(0.0, 0.0)
        return self.sequence.at(math.floor((t - self.plan_time) / self.config.dt + 1e-9))
