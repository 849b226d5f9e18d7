"""Metrics computed from a RunLog against its recorded ground truth."""

import logging
from collections.abc import Sequence
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from costmap_racer.exceptions import UnsupportedReplayError
from costmap_racer.models.filter import StateEstimate
from costmap_racer.models.geometry import Pose2D
from costmap_racer.models.records import (
    EventKind,
    EventRecord,
    MetricsReport,
    ProfileBin,
    RunLog,
    RunLogHeader,
    TracePoint,
    TruthRecord,
)
from costmap_racer.models.scenario import Scenario
from costmap_racer.models.sensors import CostmapFrame
from costmap_racer.services.costmap_sensor import frame_accuracy
from costmap_racer.services.schematic_map import extract_local_patch
from costmap_racer.services.track import TrackProjector

logger = logging.getLogger(__name__)

MATCH_TOLERANCE_S = 1e-6
PROFILE_BIN_M = 1.0
TRACE_RATE = 20.0
MIN_SLIP_SPEED = 1.0
CONVERGENCE_ERROR_M = 1.0
CONVERGENCE_HOLD_S = 5.0

PROFILE_COLUMNS = ["arc_length_m", "mean_error_m", "max_error_m"]
SUMMARY_COLUMNS = [
    "mean_error_m",
    "max_error_m",
    "laps",
    "mean_lap_time_s",
    "mean_speed",
    "max_slip_angle_deg",
    "mean_accuracy",
    "crash_count",
    "divergence_count",
    "emergency_count",
    "failed_to_initialize",
]
_TRUTH_COLUMNS = ["t", "p_x", "p_y", "psi", "v_x", "v_y", "yaw_rate", "wheel_speed_front"]
_ESTIMATE_COLUMNS = ["t", "p_x", "p_y"]


def scenario_of(header: RunLogHeader) -> Scenario | None:
    try:
        return Scenario.model_validate_json(header.scenario_json)
    except ValidationError:
        return None


def truth_table(records: Sequence[TruthRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=_TRUTH_COLUMNS).sort_values("t", kind="stable")


def estimate_table(estimates: Sequence[StateEstimate]) -> pd.DataFrame:
    rows = [(e.timestamp, e.p_x, e.p_y) for e in estimates]
    return pd.DataFrame(rows, columns=_ESTIMATE_COLUMNS, dtype=np.float64).sort_values("t", kind="stable")


def position_errors(truth: pd.DataFrame, estimates: pd.DataFrame) -> pd.DataFrame:
    """Euclidean error of each estimate against the truth record with the same timestamp.

    Returns columns t, x_true, y_true, error; estimates without matching truth are dropped.
    """
    if truth.empty or estimates.empty:
        return pd.DataFrame(columns=["t", "x_true", "y_true", "error"], dtype=np.float64)

    matched = pd.merge_asof(
        estimates.astype({"t": np.float64}),
        truth[["t", "p_x", "p_y"]].astype({"t": np.float64}),
        on="t",
        direction="nearest",
        tolerance=MATCH_TOLERANCE_S,
        suffixes=("_est", "_true"),
    ).dropna(subset=["p_x_true"])

    return pd.DataFrame(
        {
            "t": matched["t"].to_numpy(),
            "x_true": matched["p_x_true"].to_numpy(),
            "y_true": matched["p_y_true"].to_numpy(),
            "error": np.hypot(
                matched["p_x_est"].to_numpy() - matched["p_x_true"].to_numpy(),
                matched["p_y_est"].to_numpy() - matched["p_y_true"].to_numpy(),
            ),
        }
    )


def error_profile(errors: pd.DataFrame, projector: TrackProjector, bin_width: float = PROFILE_BIN_M) -> list[ProfileBin]:
    """Mean and max error binned by the truth position's arc length along the centerline."""
    if errors.empty:
        return []
    s, _ = projector.project(errors["x_true"].to_numpy(), errors["y_true"].to_numpy())
    binned = (
        errors.assign(arc_length_m=np.floor(s / bin_width) * bin_width)
        .groupby("arc_length_m", sort=True)["error"]
        .agg(mean_error_m="mean", max_error_m="max")
        .reset_index()
    )
    return [ProfileBin(**row) for row in binned.to_dict("records")]


def lap_times(events: Sequence[EventRecord]) -> list[float]:
    boundaries = [e.t for e in events if e.kind == EventKind.LAP]
    return np.diff([0.0, *boundaries]).tolist()


def speed_trace(truth: pd.DataFrame, rate: float = TRACE_RATE) -> pd.DataFrame:
    """Speed and slip angle sampled from truth on the ``rate`` grid.

    Slip angle is atan2(v_y, |v_x|) in degrees.
    """
    phase = truth["t"].to_numpy() * rate
    on_grid = np.abs(phase - np.round(phase)) < 1e-6
    sampled = truth[on_grid]
    return pd.DataFrame(
        {
            "t": sampled["t"].to_numpy(),
            "speed": np.hypot(sampled["v_x"], sampled["v_y"]).to_numpy(),
            "slip_angle_deg": np.degrees(np.arctan2(sampled["v_y"], np.abs(sampled["v_x"]))).to_numpy(),
        }
    )


def max_slip_angle(truth: pd.DataFrame, min_speed: float = MIN_SLIP_SPEED) -> float | None:
    moving = truth[np.hypot(truth["v_x"], truth["v_y"]) >= min_speed]
    if moving.empty:
        return None
    return float(np.degrees(np.max(np.abs(np.arctan2(moving["v_y"], np.abs(moving["v_x"]))))))


def mean_frame_accuracy(log: RunLog, truth: pd.DataFrame, latency: float) -> float | None:
    """Mean A_t of logged frames against clean patches cut at the true capture pose."""
    schematic = log.map()
    frames = log.of_type(CostmapFrame)
    if schematic is None or not frames or truth.empty:
        return None

    captures = pd.DataFrame({"t": [f.timestamp - latency for f in frames], "frame": range(len(frames))})
    poses = pd.merge_asof(
        captures.sort_values("t"),
        truth[["t", "p_x", "p_y", "psi"]],
        on="t",
        direction="backward",
        tolerance=1.0,
    ).dropna(subset=["p_x"])
    if poses.empty:
        return None

    scores = [
        frame_accuracy(
            frames[int(row.frame)],
            extract_local_patch(schematic, Pose2D(row.p_x, row.p_y, row.psi), frames[int(row.frame)].spec),
        )
        for row in poses.itertuples()
    ]
    return float(np.mean(scores))


def convergence_time(
    errors: pd.DataFrame,
    threshold: float = CONVERGENCE_ERROR_M,
    hold: float = CONVERGENCE_HOLD_S,
) -> float | None:
    """Start of the first stretch where the error stays below ``threshold`` for ``hold`` seconds."""
    if errors.empty:
        return None
    below = errors["error"] < threshold
    stretch = (below != below.shift()).cumsum()
    for _, group in errors[below].groupby(stretch[below]):
        if group["t"].iloc[-1] - group["t"].iloc[0] >= hold - 1e-9:
            return float(group["t"].iloc[0])
    return None


def compute_report(
    log: RunLog,
    *,
    estimates: Sequence[StateEstimate] | None = None,
    filter_events: Sequence[EventRecord] | None = None,
    bin_width: float = PROFILE_BIN_M,
) -> MetricsReport:
    """Build a MetricsReport from a log.

    ``estimates`` and ``filter_events`` replace the recorded estimate stream and
    divergence/reinit events, for reports on an off-policy replay.
    """
    truth_records = log.of_type(TruthRecord)
    if not truth_records:
        raise UnsupportedReplayError()

    scenario = scenario_of(log.header)
    truth = truth_table(truth_records)
    if estimates is None:
        estimates = log.of_type(StateEstimate)
    errors = position_errors(truth, estimate_table(estimates))

    events = log.events()
    if filter_events is not None:
        recorded = [e for e in events if e.kind not in (EventKind.DIVERGENCE, EventKind.REINIT)]
        events = sorted([*recorded, *filter_events], key=lambda e: e.t)
    counts = pd.Series([e.kind for e in events], dtype=object).value_counts().to_dict()

    centerline = log.centerline()
    profile = error_profile(errors, TrackProjector(centerline), bin_width) if centerline is not None else []
    trace = speed_trace(truth)
    latency = scenario.sensor.degradation.latency if scenario is not None else 0.0
    converged_at = convergence_time(errors)
    duration = float(truth["t"].iloc[-1])

    notes = []
    if log.truncated:
        notes.append(f"log truncated; metrics cover 0.000 to {duration:.3f} s")
    if errors.empty:
        notes.append("no estimates matched ground truth")
    if scenario is None:
        notes.append("log header carries no valid scenario")

    failed_to_initialize = None
    if scenario is not None and scenario.initialization.kind == "uniform":
        failed_to_initialize = converged_at is None

    report = MetricsReport(
        scenario=scenario.name if scenario is not None else None,
        seed=log.header.seed,
        duration_s=duration,
        n_estimates=len(errors),
        mean_position_error_m=float(errors["error"].mean()) if not errors.empty else None,
        max_position_error_m=float(errors["error"].max()) if not errors.empty else None,
        error_profile=profile,
        lap_times_s=lap_times(events),
        mean_speed=float(np.hypot(truth["v_x"], truth["v_y"]).mean()),
        max_slip_angle_deg=max_slip_angle(truth),
        trace=[TracePoint(**row) for row in trace.to_dict("records")],
        mean_accuracy=mean_frame_accuracy(log, truth, latency),
        crash_count=int(counts.get(EventKind.CRASH, 0)),
        divergence_count=int(counts.get(EventKind.DIVERGENCE, 0)),
        reinit_count=int(counts.get(EventKind.REINIT, 0)),
        emergency_count=int(counts.get(EventKind.EMERGENCY, 0)),
        convergence_time_s=converged_at,
        failed_to_initialize=failed_to_initialize,
        truncated=log.truncated,
        notes=notes,
    )
    logger.info(
        "Computed metrics report",
        extra={"seed": report.seed, "mean_error": report.mean_position_error_m, "laps": len(report.lap_times_s)},
    )
    return report


def profile_table(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([b.model_dump() for b in report.error_profile], columns=PROFILE_COLUMNS)


def trace_table(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in report.trace], columns=["t", "speed", "slip_angle_deg"])


def write_profile_csv(report: MetricsReport, path: Path) -> Path:
    profile_table(report).to_csv(path, index=False)
    return Path(path)


def summary_row(report: MetricsReport) -> dict:
    """Flat scalar view of a report for sweep tables."""
    laps = report.lap_times_s
    return {
        "mean_error_m": report.mean_position_error_m,
        "max_error_m": report.max_position_error_m,
        "laps": len(laps),
        "mean_lap_time_s": float(np.mean(laps)) if laps else None,
        "mean_speed": report.mean_speed,
        "max_slip_angle_deg": report.max_slip_angle_deg,
        "mean_accuracy": report.mean_accuracy,
        "crash_count": report.crash_count,
        "divergence_count": report.divergence_count,
        "emergency_count": report.emergency_count,
        "failed_to_initialize": report.failed_to_initialize,
    }
