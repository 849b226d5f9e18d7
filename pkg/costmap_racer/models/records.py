from dataclasses import dataclass, field
from enum import IntEnum
from typing import TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from costmap_racer.models.control import ControlSequence
from costmap_racer.models.filter import StateEstimate
from costmap_racer.models.geometry import Centerline
from costmap_racer.models.maps import SchematicMap
from costmap_racer.models.sensors import CostmapFrame, ImuSample, WheelSpeedSample

RUN_LOG_VERSION = 1


class EventKind(IntEnum):
    LAP = 1
    CRASH = 2
    DIVERGENCE = 3
    REINIT = 4
    EMERGENCY = 5
    TIMEOUT = 6
    FINISHED = 7
    FAILURE = 8


TERMINAL_EVENTS = frozenset({EventKind.CRASH, EventKind.TIMEOUT, EventKind.FINISHED, EventKind.FAILURE})


@dataclass(frozen=True)
class RunLogHeader:
    version: int
    seed: int
    scenario_hash: bytes
    scenario_json: str


@dataclass(frozen=True, slots=True)
class TruthRecord:
    t: float
    p_x: float
    p_y: float
    psi: float
    v_x: float
    v_y: float
    yaw_rate: float
    wheel_speed_front: float


@dataclass(frozen=True, slots=True)
class ControlRecord:
    t: float
    steering: float
    throttle: float


@dataclass(frozen=True, eq=False)
class PlanRecord:
    t: float
    sequence: ControlSequence

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlanRecord):
            return NotImplemented
        return (
            self.t == other.t
            and self.sequence.dt == other.sequence.dt
            and self.sequence.emergency == other.sequence.emergency
            and np.array_equal(self.sequence.controls, other.sequence.controls)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True)
class EventRecord:
    t: float
    kind: EventKind
    detail: str = ""


Record = Union[
    SchematicMap,
    Centerline,
    TruthRecord,
    ImuSample,
    WheelSpeedSample,
    CostmapFrame,
    StateEstimate,
    ControlRecord,
    PlanRecord,
    EventRecord,
]

R = TypeVar("R")


@dataclass(eq=False)
class RunLog:
    header: RunLogHeader
    records: list[Record] = field(default_factory=list)
    truncated: bool = False

    def append(self, record: Record) -> None:
        self.records.append(record)

    def of_type(self, record_type: type[R]) -> list[R]:
        return [r for r in self.records if type(r) is record_type]

    def events(self, kind: EventKind | None = None) -> list[EventRecord]:
        events = self.of_type(EventRecord)
        if kind is None:
            return events
        return [e for e in events if e.kind == kind]

    def map(self) -> SchematicMap | None:
        maps = self.of_type(SchematicMap)
        return maps[0] if maps else None

    def centerline(self) -> Centerline | None:
        centerlines = self.of_type(Centerline)
        return centerlines[0] if centerlines else None


class ProfileBin(BaseModel):
    arc_length_m: float
    mean_error_m: float
    max_error_m: float


class TracePoint(BaseModel):
    t: float
    speed: float
    slip_angle_deg: float


class MetricsReport(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    scenario: str | None = None
    seed: int | None = None
    duration_s: float = 0.0
    n_estimates: int = 0

    mean_position_error_m: float | None = None
    max_position_error_m: float | None = None
    error_profile: list[ProfileBin] = []

    lap_times_s: list[float] = []
    mean_speed: float | None = None
    max_slip_angle_deg: float | None = None
    trace: list[TracePoint] = []

    mean_accuracy: float | None = None

    crash_count: int = 0
    divergence_count: int = 0
    reinit_count: int = 0
    emergency_count: int = 0

    convergence_time_s: float | None = None
    failed_to_initialize: bool | None = None

    truncated: bool = False
    notes: list[str] = []
