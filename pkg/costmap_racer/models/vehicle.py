from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from costmap_racer.models.geometry import Pose2D

GRAVITY = 9.81


@dataclass(frozen=True, slots=True)
class SimState:
    t: float
    pose: Pose2D
    v_x: float = 0.0
    v_y: float = 0.0
    yaw_rate: float = 0.0
    wheel_speed_front: float = 0.0

    def as_array(self) -> np.ndarray:
        """Rollout layout (p_x, p_y, psi, v_x, v_y, yaw_rate)."""
        return np.array(
            [self.pose.p_x, self.pose.p_y, self.pose.psi, self.v_x, self.v_y, self.yaw_rate],
            dtype=np.float64,
        )

    def kinetic_energy(self, params: "VehicleParams") -> float:
        return 0.5 * params.mass * (self.v_x**2 + self.v_y**2) + 0.5 * params.yaw_inertia * self.yaw_rate**2


class VehicleParams(BaseModel):
    """Dynamic bicycle parameters, defaults sized to a 1:5-scale car."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mass: float = Field(default=22.0, gt=0)
    yaw_inertia: float = Field(default=1.1, gt=0)
    l_front: float = Field(default=0.30, gt=0)
    l_rear: float = Field(default=0.27, gt=0)
    stiffness_front: float = Field(default=1400.0, gt=0)
    stiffness_rear: float = Field(default=1600.0, gt=0)
    mu: float = Field(default=0.9, gt=0, le=2)
    drivetrain_gain: float = Field(default=6.0, gt=0)
    drag_linear: float = Field(default=0.1, ge=0)
    drag_quadratic: float = Field(default=0.0235, ge=0)
    max_steer: float = Field(default=0.4, gt=0)
    wheel_lag: float = Field(default=0.05, gt=0)
    kinematic_speed: float = Field(default=0.5, gt=0)

    @property
    def wheelbase(self) -> float:
        return self.l_front + self.l_rear

    def as_array(self) -> np.ndarray:
        """Packed parameter vector consumed by the compiled kernels."""
        return np.array(
            [
                self.mass,
                self.yaw_inertia,
                self.l_front,
                self.l_rear,
                self.stiffness_front,
                self.stiffness_rear,
                self.mu,
                self.drivetrain_gain,
                self.drag_linear,
                self.drag_quadratic,
                self.max_steer,
                self.kinematic_speed,
            ],
            dtype=np.float64,
        )
