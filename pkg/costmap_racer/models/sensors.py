from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from costmap_racer.exceptions import InvalidInputError
from costmap_racer.models.maps import PatchSpec


@dataclass(frozen=True, eq=False)
class CostmapFrame:
    """Egocentric cost observation; ``timestamp`` is the delivery time."""

    timestamp: float
    spec: PatchSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != self.spec.shape:
            raise InvalidInputError(
                f"Frame values shape {values.shape} does not match spec {self.spec.shape}",
                field="values",
            )
        values = np.clip(values, 0.0, 1.0)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CostmapFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.spec == other.spec
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


class DegradationParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pixel_noise_sigma: float = Field(default=0.0, ge=0)
    blur_radius_px: int = Field(default=0, ge=0)
    dropout_prob: float = Field(default=0.0, ge=0, le=1)
    heading_bias: float = 0.0
    lateral_bias: float = 0.0
    latency: float = Field(default=0.0, ge=0)
    target_accuracy: float | None = Field(default=None, ge=0, le=1)


@dataclass(frozen=True, slots=True)
class ImuSample:
    timestamp: float
    a_x: float
    a_y: float
    a_z: float
    alpha_x: float
    alpha_y: float
    alpha_z: float

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite([self.a_x, self.a_y, self.a_z, self.alpha_x, self.alpha_y, self.alpha_z]))
        )


@dataclass(frozen=True, slots=True)
class WheelSpeedSample:
    timestamp: float
    W: float

    def __post_init__(self) -> None:
        if not self.W >= 0.0:
            raise InvalidInputError("Wheel speed must be non-negative", field="W")


class SensorNoiseParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    accel_noise_std: float = Field(default=0.05, ge=0)
    gyro_noise_std: float = Field(default=0.005, ge=0)
    accel_bias: float = 0.0
    gyro_bias: float = 0.0
    wheel_noise_std: float = Field(default=0.1, ge=0)

    @classmethod
    def noiseless(cls) -> "SensorNoiseParams":
        return cls(accel_noise_std=0.0, gyro_noise_std=0.0, wheel_noise_std=0.0)
