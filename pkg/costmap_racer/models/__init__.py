from costmap_racer.models.control import Control, ControlSequence, CostWeights, MppiConfig
from costmap_racer.models.filter import (
    FilterConfig,
    KnownPosePrior,
    ParticleSet,
    ParticleState,
    StateEstimate,
    UniformOnTrackPrior,
)
from costmap_racer.models.geometry import Centerline, Pose2D, wrap_angle
from costmap_racer.models.maps import LocalPatch, PatchSpec, SchematicMap
from costmap_racer.models.records import EventKind, EventRecord, MetricsReport, RunLog
from costmap_racer.models.scenario import Scenario
from costmap_racer.models.sensors import (
    CostmapFrame,
    DegradationParams,
    ImuSample,
    SensorNoiseParams,
    WheelSpeedSample,
)
from costmap_racer.models.vehicle import SimState, VehicleParams

__all__ = [
    "Centerline",
    "Control",
    "ControlSequence",
    "CostWeights",
    "CostmapFrame",
    "DegradationParams",
    "EventKind",
    "EventRecord",
    "FilterConfig",
    "ImuSample",
    "KnownPosePrior",
    "LocalPatch",
    "MetricsReport",
    "MppiConfig",
    "ParticleSet",
    "ParticleState",
    "PatchSpec",
    "Pose2D",
    "RunLog",
    "Scenario",
    "SchematicMap",
    "SensorNoiseParams",
    "SimState",
    "StateEstimate",
    "UniformOnTrackPrior",
    "VehicleParams",
    "WheelSpeedSample",
    "wrap_angle",
]
