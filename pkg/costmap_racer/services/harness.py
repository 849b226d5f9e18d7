import itertools
import json
import logging
import socket
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from costmap_racer.exceptions import ConfigError, InvalidInputError, ServiceError, UnsupportedReplayError
from costmap_racer.models.filter import FilterConfig, KnownPosePrior, StateEstimate, UniformOnTrackPrior
from costmap_racer.models.geometry import Centerline, Pose2D
from costmap_racer.models.maps import SchematicMap
from costmap_racer.models.records import EventRecord, MetricsReport, RunLog, TruthRecord
from costmap_racer.models.scenario import KnownPoseInit, MapSection, Scenario
from costmap_racer.models.sensors import CostmapFrame, ImuSample, WheelSpeedSample
from costmap_racer.services.costmap_sensor import (
    ExternalSource,
    FrameSource,
    ReplaySource,
    SyntheticSource,
    calibrate_degradation,
)
from costmap_racer.services.metrics import SUMMARY_COLUMNS, compute_report, scenario_of, summary_row
from costmap_racer.services.mppi_controller import BicycleDynamics, MppiPlanner
from costmap_racer.services.particle_filter import ParticleFilter, run_filter
from costmap_racer.services.run_log import read_run_log, scenario_header, write_run_log
from costmap_racer.services.schematic_map import build_map, load_centerline, load_map
from costmap_racer.services.track import TrackProjector, centerline_poses, synthetic_centerline
from costmap_racer.services.vehicle_sim import SensorSuite, run_closed_loop
from costmap_racer.utils.seeding import derive_seed, module_rng

logger = logging.getLogger(__name__)

# scenario keys holding file paths, resolved against the scenario's directory
PATH_FIELDS = ("map.centerline_path", "map.map_path", "sensor.replay_path")


# ============================================================================
# Scenario loading
# ============================================================================


def _dotted(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc) or "scenario"


def _get(document: dict, dotted: str) -> Any:
    node: Any = document
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            return None
        node = node[key]
    return node


def set_dotted(document: dict, dotted: str, value: Any) -> None:
    """Set ``a.b.c`` in a nested mapping, creating intermediate mappings."""
    *parents, leaf = dotted.split(".")
    node = document
    for key in parents:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not a section", field=dotted)
        node = child
    node[leaf] = value


def scenario_from_dict(document: Any, base_dir: Path | None = None) -> Scenario:
    """Validate a parsed scenario document.

    Relative file paths are resolved against ``base_dir`` and must exist.
    """
    if not isinstance(document, dict):
        raise ConfigError("scenario document must be a mapping", field="scenario")

    if base_dir is not None:
        for dotted in PATH_FIELDS:
            value = _get(document, dotted)
            if value is not None and not Path(value).is_absolute():
                set_dotted(document, dotted, str(base_dir / value))

    try:
        scenario = Scenario.model_validate(document)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(error["msg"], field=_dotted(error["loc"])) from exc

    for dotted in PATH_FIELDS:
        path = _get(scenario.model_dump(), dotted)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"file not found: {path}", field=dotted)
    if scenario.map.source == "file" and scenario.map.centerline_path is None:
        raise ConfigError(
            "closed-loop runs need a centerline for the start line and lap counting",
            field="map.centerline_path",
        )
    return scenario


def load_scenario(path: Path) -> Scenario:
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc.strerror}", field="scenario") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}", field="scenario") from exc
    scenario = scenario_from_dict(document, base_dir=path.parent)
    logger.info("Loaded scenario", extra={"scenario": scenario.name, "seed": scenario.seed})
    return scenario


# ============================================================================
# Component wiring
# ============================================================================


@lru_cache(maxsize=4)
def build_track(section: MapSection) -> tuple[SchematicMap, Centerline | None]:
    """Schematic map and centerline for a map section; cached per section."""
    if section.source == "file":
        schematic = load_map(section.map_path)
        centerline = load_centerline(section.centerline_path) if section.centerline_path else None
        return schematic, centerline

    if section.source == "synthetic":
        centerline = synthetic_centerline()
    else:
        centerline = load_centerline(section.centerline_path)
    schematic = build_map(
        centerline,
        section.resolution,
        section.track_halfwidth,
        section.extent_margin,
        ramp_exponent=section.ramp_exponent,
        method=section.method,
    )
    return schematic, centerline


def build_prior(scenario: Scenario, start: Pose2D) -> KnownPosePrior | UniformOnTrackPrior:
    init = scenario.initialization
    if isinstance(init, KnownPoseInit):
        return KnownPosePrior.from_std((start.p_x, start.p_y, start.psi, 0.0, 0.0), init.std)
    return UniformOnTrackPrior()


def connect_external(endpoint: str, timeout: float = 5.0) -> ExternalSource:
    host, _, port = endpoint.rpartition(":")
    sock = socket.create_connection((host, int(port)), timeout=timeout)
    sock.settimeout(None)
    return ExternalSource(sock.makefile("rb"), name=endpoint)


def build_sensors(scenario: Scenario, schematic: SchematicMap, centerline: Centerline) -> SensorSuite:
    section = scenario.sensor
    seed = scenario.seed

    degradation = section.degradation
    if degradation.target_accuracy is not None:
        degradation = calibrate_degradation(
            schematic,
            centerline_poses(centerline),
            degradation.target_accuracy,
            module_rng(seed, "calibration"),
            base=degradation,
            spec=section.frame,
            n_frames=section.calibration_frames,
        )

    frame_source: FrameSource | None = None
    match section.kind:
        case "synthetic":
            frame_source = SyntheticSource(
                schematic, degradation, module_rng(seed, "sensor"), spec=section.frame, rate=section.rate
            )
        case "replay":
            frame_source = ReplaySource(read_run_log(section.replay_path).of_type(CostmapFrame))
        case "external":
            frame_source = connect_external(section.endpoint)

    planning_source = None
    if scenario.mppi.mode == "mapless":
        planning_source = SyntheticSource(
            schematic,
            degradation,
            module_rng(seed, "planning_sensor"),
            spec=section.planning_frame,
            rate=scenario.mppi.control_rate,
        )
    return SensorSuite(scenario.sensor_noise, module_rng(seed, "vehicle"), frame_source, planning_source)


# ============================================================================
# Operations
# ============================================================================


@dataclass
class RunResult:
    log: RunLog
    report: MetricsReport
    log_path: Path | None = None
    digest: str | None = None


def simulate(scenario: Scenario) -> RunLog:
    """Run one closed-loop episode and return its log."""
    schematic, centerline = build_track(scenario.map)
    start = TrackProjector(centerline).start_pose()
    sensors = build_sensors(scenario, schematic, centerline)
    particle_filter = ParticleFilter(
        schematic, scenario.filter, module_rng(scenario.seed, "filter"), build_prior(scenario, start)
    )
    planner = MppiPlanner(
        scenario.mppi, scenario.weights, BicycleDynamics(scenario.vehicle), module_rng(scenario.seed, "mppi")
    )
    try:
        return run_closed_loop(
            schematic,
            sensors,
            particle_filter,
            planner,
            scenario,
            centerline=centerline,
            header=scenario_header(scenario),
        )
    finally:
        if isinstance(sensors.frame_source, ExternalSource):
            sensors.frame_source.close()


def run(scenario: Scenario, out_dir: Path | None = None) -> RunResult:
    log = simulate(scenario)
    metrics = compute_report(log)
    result = RunResult(log, metrics)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = out_dir / f"{scenario.name}-{scenario.seed}.rlog"
        result.digest = write_run_log(log, result.log_path)
        (out_dir / f"{scenario.name}-{scenario.seed}.report.json").write_text(metrics.model_dump_json(indent=2))
    logger.info(
        "Run finished",
        extra={"scenario": scenario.name, "seed": scenario.seed, "laps": len(metrics.lap_times_s)},
    )
    return result


def replay_filter(
    log: RunLog,
    config: FilterConfig | None = None,
    *,
    seed: int | None = None,
) -> tuple[list[StateEstimate], list[EventRecord]]:
    """Re-run the particle filter over the log's recorded sensor streams.

    Recorded estimates are ignored. Returns (estimates, divergence/reinit events).
    """
    truth = log.of_type(TruthRecord)
    if not truth:
        raise UnsupportedReplayError()
    imu = log.of_type(ImuSample)
    if not imu:
        raise UnsupportedReplayError("Log has no IMU records")
    schematic = log.map()
    if schematic is None:
        raise UnsupportedReplayError("Log has no map record")
    scenario = scenario_of(log.header)
    if scenario is None:
        raise UnsupportedReplayError("Log header carries no valid scenario")

    config = config or scenario.filter
    seed = log.header.seed if seed is None else seed
    first = truth[0]
    prior = build_prior(scenario, Pose2D(first.p_x, first.p_y, first.psi))
    frames = log.of_type(CostmapFrame)

    events: list[EventRecord] = []
    estimates = list(
        run_filter(
            imu,
            log.of_type(WheelSpeedSample),
            ReplaySource(frames) if frames else None,
            schematic,
            config,
            module_rng(seed, "filter"),
            prior,
            events=events,
        )
    )
    return estimates, events


def replay(log: RunLog, config: FilterConfig | None = None, *, seed: int | None = None) -> MetricsReport:
    """Off-policy evaluation: filter error on recorded data."""
    estimates, events = replay_filter(log, config, seed=seed)
    report = compute_report(log, estimates=estimates, filter_events=events)
    return report.model_copy(update={"notes": [*report.notes, "off-policy replay"]})


def report(log_path: Path) -> MetricsReport:
    return compute_report(read_run_log(log_path))


# ============================================================================
# Sweeps
# ============================================================================


class SweepGrid(BaseModel):
    """Parameter grid: dotted scenario keys mapped to the values to try."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "sweep"
    replicates: int = Field(default=1, ge=1)
    parameters: dict[str, list[Any]] = Field(min_length=1)


def load_grid(path: Path) -> SweepGrid:
    try:
        document = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return SweepGrid.model_validate(document)
    except OSError as exc:
        raise ConfigError(f"cannot read grid file {path}: {exc.strerror}", field="grid") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}", field="grid") from exc
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(error["msg"], field="grid." + _dotted(error["loc"])) from exc


@dataclass(frozen=True)
class SweepJob:
    cell: int
    replicate: int
    overrides: dict[str, Any]
    scenario_json: str = field(repr=False)


def expand_grid(template: Scenario, grid: SweepGrid) -> list[SweepJob]:
    """Cartesian product of the grid, one job per cell and replicate.

    Every cell is validated up front; replicate seeds derive from the template seed.
    """
    if any(not values for values in grid.parameters.values()):
        raise InvalidInputError("every grid parameter needs at least one value", field="grid.parameters")

    keys = list(grid.parameters)
    jobs = []
    for cell, values in enumerate(itertools.product(*grid.parameters.values())):
        overrides = dict(zip(keys, values))
        document = template.model_dump(mode="json")
        for dotted, value in overrides.items():
            set_dotted(document, dotted, value)
        for replicate in range(grid.replicates):
            document["seed"] = derive_seed(template.seed, cell, replicate)
            scenario = scenario_from_dict(document)
            jobs.append(SweepJob(cell, replicate, overrides, scenario.model_dump_json()))
    return jobs


def run_cell(job: SweepJob) -> dict[str, Any]:
    """One sweep replicate; failures are recorded in the row instead of raised."""
    scenario = Scenario.model_validate_json(job.scenario_json)
    row: dict[str, Any] = {
        "cell": job.cell,
        "replicate": job.replicate,
        "seed": scenario.seed,
        "overrides": json.dumps(job.overrides, sort_keys=True),
        "status": "ok",
        "error": None,
        "off_policy_error_m": None,
        **dict.fromkeys(SUMMARY_COLUMNS),
    }
    try:
        log = simulate(scenario)
        row.update(summary_row(compute_report(log)))
        row["off_policy_error_m"] = replay(log).mean_position_error_m
    except ServiceError as exc:
        logger.warning("Sweep cell failed", extra={"cell": job.cell, "replicate": job.replicate, **exc.context})
        row.update(status="failed", error=exc.message)
    except Exception as exc:
        logger.exception("Sweep cell raised unexpectedly", extra={"cell": job.cell, "replicate": job.replicate})
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def sweep(template: Scenario, grid: SweepGrid, *, workers: int = 1) -> pd.DataFrame:
    """Run every grid cell and return one row per replicate."""
    jobs = expand_grid(template, grid)
    logger.info("Starting sweep", extra={"sweep": grid.name, "jobs": len(jobs), "workers": workers})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, jobs))
    else:
        rows = [run_cell(job) for job in jobs]
    return pd.DataFrame(rows).sort_values(["cell", "replicate"], ignore_index=True)


def summarize_sweep(rows: pd.DataFrame) -> pd.DataFrame:
    """Per-cell comparison table: replicate means plus summed event counts."""
    numeric = [c for c in (*SUMMARY_COLUMNS, "off_policy_error_m") if c != "failed_to_initialize"]
    ok = rows[rows["status"] == "ok"].astype({c: float for c in numeric})
    means = ok.groupby("cell").agg(
        overrides=("overrides", "first"),
        mean_error_m=("mean_error_m", "mean"),
        off_policy_error_m=("off_policy_error_m", "mean"),
        mean_lap_time_s=("mean_lap_time_s", "mean"),
        mean_speed=("mean_speed", "mean"),
        mean_accuracy=("mean_accuracy", "mean"),
        crash_count=("crash_count", "sum"),
        divergence_count=("divergence_count", "sum"),
    )
    counts = rows.groupby("cell").agg(
        replicates=("replicate", "count"),
        failures=("status", lambda s: int((s != "ok").sum())),
    )
    return counts.join(means, how="left").reset_index()
