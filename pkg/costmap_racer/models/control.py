from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from costmap_racer.exceptions import InvalidInputError

CONTROL_LOW = -1.0
CONTROL_HIGH = 1.0


@dataclass(frozen=True, slots=True)
class Control:
    steering: float
    throttle: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "steering", float(np.clip(self.steering, CONTROL_LOW, CONTROL_HIGH)))
        object.__setattr__(self, "throttle", float(np.clip(self.throttle, CONTROL_LOW, CONTROL_HIGH)))


@dataclass(frozen=True, eq=False)
class ControlSequence:
    """Receding-horizon plan; ``controls`` is (T, 2) as (steering, throttle)."""

    dt: float
    controls: np.ndarray
    emergency: bool = field(default=False)

    def __post_init__(self) -> None:
        controls = np.asarray(self.controls, dtype=np.float64)
        if controls.ndim != 2 or controls.shape[1] != 2 or len(controls) < 1:
            raise InvalidInputError("Control sequence must be a non-empty (T, 2) array", field="controls")
        if not self.dt > 0:
            raise InvalidInputError("Control sequence dt must be positive", field="dt")
        controls = np.clip(controls, CONTROL_LOW, CONTROL_HIGH)
        controls.flags.writeable = False
        object.__setattr__(self, "controls", controls)

    @classmethod
    def zeros(cls, horizon: int, dt: float, emergency: bool = False) -> "ControlSequence":
        return cls(dt, np.zeros((horizon, 2)), emergency=emergency)

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def at(self, index: int) -> Control:
        index = min(max(index, 0), self.horizon - 1)
        steering, throttle = self.controls[index]
        return Control(float(steering), float(throttle))

    def shifted(self, steps: int) -> "ControlSequence":
        """Drop ``steps`` leading entries, repeating the last entry to keep the horizon."""
        if steps <= 0:
            return ControlSequence(self.dt, self.controls)
        steps = min(steps, self.horizon)
        tail = np.repeat(self.controls[-1:], steps, axis=0)
        return ControlSequence(self.dt, np.concatenate([self.controls[steps:], tail]))


class CostWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    track: float = Field(default=25.0, ge=0)
    speed: float = Field(default=1.0, ge=0)
    indicator: float = Field(default=200.0, ge=0)
    slip: float = Field(default=5.0, ge=0)

    c_max: float = Field(default=0.9, ge=0, le=1)
    r_max: float = Field(default=5.0, gt=0)
    decay: float = Field(default=0.9, gt=0, lt=1)

    speed_mode: Literal["target", "unbounded"] = "target"
    target_speed: float | None = Field(default=None, ge=0)

    @property
    def desired_speed(self) -> float:
        if self.target_speed is not None:
            return self.target_speed
        return 6.0 if self.speed_mode == "target" else 25.0


class MppiConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_samples: int = Field(default=1200, ge=1)
    horizon: int = Field(default=60, ge=1)
    dt: float = Field(default=0.025, gt=0)
    noise_std: tuple[float, float] = (0.3, 0.3)
    temperature: float = Field(default=1.0, gt=0)
    mode: Literal["map", "mapless"] = "map"
    control_rate: float = Field(default=20.0, gt=0)

    # map planning waits for the estimate to settle; None plans on the map from the first tick
    localized_std: float | None = Field(default=1.0, gt=0)
    search_speed: float = Field(default=2.0, gt=0)
