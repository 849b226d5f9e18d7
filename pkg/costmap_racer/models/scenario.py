from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from costmap_racer.models.control import CostWeights, MppiConfig
from costmap_racer.models.filter import FilterConfig
from costmap_racer.models.maps import PatchSpec
from costmap_racer.models.sensors import DegradationParams, SensorNoiseParams
from costmap_racer.models.vehicle import VehicleParams

SCHEMA_VERSION = 1


class Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MapSection(Section):
    source: Literal["synthetic", "centerline", "file"] = "synthetic"
    centerline_path: Path | None = None
    map_path: Path | None = None
    resolution: float = Field(default=15.0, gt=0)
    track_halfwidth: float = Field(default=2.0, gt=0)
    extent_margin: float = Field(default=3.0, ge=0)
    ramp_exponent: float = Field(default=1.0, gt=0)
    method: Literal["exact", "kdtree"] = "exact"

    @model_validator(mode="after")
    def check_paths(self) -> "MapSection":
        if self.source == "centerline" and self.centerline_path is None:
            raise ValueError("centerline_path is required when source is 'centerline'")
        if self.source == "file" and self.map_path is None:
            raise ValueError("map_path is required when source is 'file'")
        return self


class SensorSection(Section):
    kind: Literal["synthetic", "replay", "external", "disabled"] = "synthetic"
    degradation: DegradationParams = Field(default_factory=DegradationParams)
    frame: PatchSpec = Field(default_factory=PatchSpec)
    planning_frame: PatchSpec = Field(default_factory=PatchSpec.planning)
    rate: float = Field(default=20.0, gt=0)
    replay_path: Path | None = None
    endpoint: str | None = None
    calibration_frames: int = Field(default=1000, ge=1)

    @model_validator(mode="after")
    def check_variant(self) -> "SensorSection":
        if self.kind == "replay" and self.replay_path is None:
            raise ValueError("replay_path is required when kind is 'replay'")
        if self.kind == "external":
            if self.endpoint is None:
                raise ValueError("endpoint is required when kind is 'external'")
            host, sep, port = self.endpoint.rpartition(":")
            if not sep or not host or not port.isdigit():
                raise ValueError("endpoint must look like host:port")
        return self


class RatesSection(Section):
    sim_rate: float = Field(default=1000.0, gt=0)
    imu_rate: float = Field(default=200.0, gt=0)
    wheel_rate: float = Field(default=20.0, gt=0)

    @model_validator(mode="after")
    def check_rates(self) -> "RatesSection":
        if not self.sim_rate >= self.imu_rate >= self.wheel_rate:
            raise ValueError("rates must satisfy sim_rate >= imu_rate >= wheel_rate")
        for rate in (self.imu_rate, self.wheel_rate):
            ratio = self.sim_rate / rate
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("sensor rates must divide sim_rate")
        ratio = self.imu_rate / self.wheel_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("wheel_rate must divide imu_rate")
        return self

    @property
    def sim_dt(self) -> float:
        return 1.0 / self.sim_rate


class KnownPoseInit(Section):
    """Gaussian prior centered on the true start state."""

    kind: Literal["known_pose"] = "known_pose"
    std: tuple[float, float, float, float, float] = (0.2, 0.2, 0.05, 0.1, 0.1)


class UniformInit(Section):
    kind: Literal["uniform"] = "uniform"


Initialization = Annotated[KnownPoseInit | UniformInit, Field(discriminator="kind")]


class TerminationSection(Section):
    laps: int | None = Field(default=3, ge=1)
    duration: float = Field(default=120.0, gt=0)
    crash_time: float = Field(default=0.5, gt=0)


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1]
    name: str = "scenario"
    seed: int = Field(default=0, ge=0, lt=2**64)

    map: MapSection = Field(default_factory=MapSection)
    sensor: SensorSection = Field(default_factory=SensorSection)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    mppi: MppiConfig = Field(default_factory=MppiConfig)
    weights: CostWeights = Field(default_factory=CostWeights)
    vehicle: VehicleParams = Field(default_factory=VehicleParams)
    sensor_noise: SensorNoiseParams = Field(default_factory=SensorNoiseParams)
    termination: TerminationSection = Field(default_factory=TerminationSection)
    rates: RatesSection = Field(default_factory=RatesSection)
    initialization: Initialization = Field(default_factory=KnownPoseInit)

    @model_validator(mode="after")
    def check_consistency(self) -> "Scenario":
        if abs(self.rates.imu_rate - self.filter.propagate_rate) > 1e-9:
            raise ValueError("filter.propagate_rate must equal rates.imu_rate")
        if not self.rates.imu_rate >= self.sensor.rate >= self.mppi.control_rate:
            raise ValueError("rates must satisfy imu_rate >= sensor.rate >= mppi.control_rate")
        ratio = self.rates.sim_rate / self.mppi.control_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("mppi.control_rate must divide rates.sim_rate")
        return self

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario.model_validate({**self.model_dump(), "seed": seed})
