import hashlib
import json
import logging
import struct
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import TypeAdapter

from costmap_racer.exceptions import InvalidInputError, RecordParseError, ServiceError
from costmap_racer.models.control import ControlSequence
from costmap_racer.models.filter import StateEstimate
from costmap_racer.models.geometry import Centerline
from costmap_racer.models.maps import SchematicMap
from costmap_racer.models.records import (
    RUN_LOG_VERSION,
    ControlRecord,
    EventKind,
    EventRecord,
    PlanRecord,
    Record,
    RunLog,
    RunLogHeader,
    TruthRecord,
)
from costmap_racer.models.scenario import Scenario
from costmap_racer.models.sensors import CostmapFrame, ImuSample, WheelSpeedSample
from costmap_racer.services.costmap_sensor import decode_frame, encode_frame
from costmap_racer.services.schematic_map import decode_map, encode_map

logger = logging.getLogger(__name__)

LOG_MAGIC = b"RLOG"
FRAMING = struct.Struct("<IB")
HEADER = struct.Struct("<4sIQ32s")
CENTERLINE = struct.Struct("<BI")
TRUTH = struct.Struct("<8d")
IMU = struct.Struct("<7d")
WHEEL = struct.Struct("<2d")
FRAME_OFFSET = struct.Struct("<d")
ESTIMATE = struct.Struct("<8d")
CONTROL = struct.Struct("<3d")
PLAN = struct.Struct("<ddBI")
EVENT = struct.Struct("<dB")

TAG_HEADER = 1
TAG_MAP = 2
TAG_CENTERLINE = 3
TAG_TRUTH = 4
TAG_IMU = 5
TAG_WHEEL = 6
TAG_FRAME = 7
TAG_ESTIMATE = 8
TAG_CONTROL = 9
TAG_PLAN = 10
TAG_EVENT = 11


def scenario_header(scenario: Scenario) -> RunLogHeader:
    scenario_json = scenario.model_dump_json()
    digest = hashlib.sha256(scenario_json.encode("utf-8")).digest()
    return RunLogHeader(RUN_LOG_VERSION, scenario.seed, digest, scenario_json)


# ============================================================================
# Encoding
# ============================================================================


def _encode_header(header: RunLogHeader) -> bytes:
    return HEADER.pack(LOG_MAGIC, header.version, header.seed, header.scenario_hash) + header.scenario_json.encode(
        "utf-8"
    )


def _encode_centerline(centerline: Centerline) -> bytes:
    points = centerline.points.astype("<f8")
    return CENTERLINE.pack(int(centerline.closed), len(points)) + points.tobytes()


def _encode_frame_record(frame: CostmapFrame) -> bytes:
    return encode_frame(frame) + FRAME_OFFSET.pack(frame.spec.longitudinal_offset)


def _encode_plan(plan: PlanRecord) -> bytes:
    sequence = plan.sequence
    head = PLAN.pack(plan.t, sequence.dt, int(sequence.emergency), sequence.horizon)
    return head + sequence.controls.astype("<f8").tobytes()


def _encode_record(record: Record) -> tuple[int, bytes]:
    match record:
        case TruthRecord():
            return TAG_TRUTH, TRUTH.pack(
                record.t,
                record.p_x,
                record.p_y,
                record.psi,
                record.v_x,
                record.v_y,
                record.yaw_rate,
                record.wheel_speed_front,
            )
        case ImuSample():
            return TAG_IMU, IMU.pack(
                record.timestamp,
                record.a_x,
                record.a_y,
                record.a_z,
                record.alpha_x,
                record.alpha_y,
                record.alpha_z,
            )
        case WheelSpeedSample():
            return TAG_WHEEL, WHEEL.pack(record.timestamp, record.W)
        case CostmapFrame():
            return TAG_FRAME, _encode_frame_record(record)
        case StateEstimate():
            return TAG_ESTIMATE, ESTIMATE.pack(
                record.timestamp,
                record.p_x,
                record.p_y,
                record.psi,
                record.v_x,
                record.v_y,
                record.position_std,
                record.ess,
            )
        case ControlRecord():
            return TAG_CONTROL, CONTROL.pack(record.t, record.steering, record.throttle)
        case PlanRecord():
            return TAG_PLAN, _encode_plan(record)
        case EventRecord():
            return TAG_EVENT, EVENT.pack(record.t, int(record.kind)) + record.detail.encode("utf-8")
        case SchematicMap():
            return TAG_MAP, encode_map(record)
        case Centerline():
            return TAG_CENTERLINE, _encode_centerline(record)
    raise InvalidInputError(f"Cannot encode record of type {type(record).__name__}", field="record")


def _frame(tag: int, payload: bytes) -> bytes:
    return FRAMING.pack(len(payload), tag) + payload


def encode_run_log(log: RunLog) -> bytes:
    chunks = [_frame(TAG_HEADER, _encode_header(log.header))]
    for record in log.records:
        chunks.append(_frame(*_encode_record(record)))
    return b"".join(chunks)


def write_run_log(log: RunLog, path: Path) -> str:
    """Write the log and return the sha256 hex digest of its bytes."""
    data = encode_run_log(log)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


# ============================================================================
# Decoding
# ============================================================================


def _decode_header(payload: bytes) -> RunLogHeader:
    magic, version, seed, digest = HEADER.unpack_from(payload)
    if magic != LOG_MAGIC:
        raise ValueError(f"bad log magic {magic!r}")
    if version != RUN_LOG_VERSION:
        raise ValueError(f"unsupported log version {version}")
    return RunLogHeader(version, seed, digest, payload[HEADER.size :].decode("utf-8"))


def _decode_centerline(payload: bytes) -> Centerline:
    closed, n = CENTERLINE.unpack_from(payload)
    expected = CENTERLINE.size + n * 16
    if len(payload) != expected:
        raise ValueError(f"centerline payload is {len(payload)} bytes, expected {expected}")
    points = np.frombuffer(payload, dtype="<f8", offset=CENTERLINE.size).reshape(n, 2)
    return Centerline(points.copy(), closed=bool(closed))


def _decode_frame_record(payload: bytes) -> CostmapFrame:
    (offset,) = FRAME_OFFSET.unpack_from(payload, len(payload) - FRAME_OFFSET.size)
    return decode_frame(payload[: -FRAME_OFFSET.size], longitudinal_offset=offset)


def _decode_plan(payload: bytes) -> PlanRecord:
    t, dt, emergency, horizon = PLAN.unpack_from(payload)
    expected = PLAN.size + horizon * 16
    if len(payload) != expected:
        raise ValueError(f"plan payload is {len(payload)} bytes, expected {expected}")
    controls = np.frombuffer(payload, dtype="<f8", offset=PLAN.size).reshape(horizon, 2)
    return PlanRecord(t, ControlSequence(dt, controls.copy(), emergency=bool(emergency)))


def _decode_event(payload: bytes) -> EventRecord:
    t, kind = EVENT.unpack_from(payload)
    return EventRecord(t, EventKind(kind), payload[EVENT.size :].decode("utf-8"))


def _fixed(layout: struct.Struct, build: Callable[..., Record]) -> Callable[[bytes], Record]:
    def decode(payload: bytes) -> Record:
        if len(payload) != layout.size:
            raise ValueError(f"payload is {len(payload)} bytes, expected {layout.size}")
        return build(*layout.unpack(payload))

    return decode


DECODERS: dict[int, Callable[[bytes], Record]] = {
    TAG_MAP: decode_map,
    TAG_CENTERLINE: _decode_centerline,
    TAG_TRUTH: _fixed(TRUTH, TruthRecord),
    TAG_IMU: _fixed(IMU, ImuSample),
    TAG_WHEEL: _fixed(WHEEL, WheelSpeedSample),
    TAG_FRAME: _decode_frame_record,
    TAG_ESTIMATE: _fixed(ESTIMATE, StateEstimate),
    TAG_CONTROL: _fixed(CONTROL, ControlRecord),
    TAG_PLAN: _decode_plan,
    TAG_EVENT: _decode_event,
}


def decode_run_log(data: bytes, *, allow_truncated: bool = True) -> RunLog:
    """Parse a RunLog byte stream.

    A record cut short at the end of the stream is dropped and the log is
    flagged truncated; any other malformed record raises RecordParseError.
    """
    header: RunLogHeader | None = None
    records: list[Record] = []
    truncated = False
    offset = 0

    while offset < len(data):
        if len(data) - offset < FRAMING.size:
            truncated = True
            break
        size, tag = FRAMING.unpack_from(data, offset)
        end = offset + FRAMING.size + size
        if end > len(data):
            truncated = True
            break
        payload = data[offset + FRAMING.size : end]

        if header is None:
            if tag != TAG_HEADER:
                raise RecordParseError("RunLog must start with a header record", offset)
            try:
                header = _decode_header(payload)
            except (struct.error, ValueError, UnicodeDecodeError) as exc:
                raise RecordParseError(f"Malformed header record: {exc}", offset) from exc
        else:
            decoder = DECODERS.get(tag)
            if decoder is None:
                raise RecordParseError(f"Unknown record tag {tag}", offset)
            try:
                records.append(decoder(payload))
            except (struct.error, ValueError, UnicodeDecodeError, ServiceError) as exc:
                raise RecordParseError(f"Malformed record with tag {tag}: {exc}", offset) from exc
        offset = end

    if header is None:
        raise RecordParseError("RunLog has no header record", offset)
    if truncated:
        if not allow_truncated:
            raise RecordParseError("RunLog ends inside a record", offset)
        logger.warning("RunLog is truncated", extra={"offset": offset})
    return RunLog(header, records, truncated=truncated)


def read_run_log(path: Path, *, allow_truncated: bool = True) -> RunLog:
    return decode_run_log(Path(path).read_bytes(), allow_truncated=allow_truncated)


# ============================================================================
# JSON Lines export
# ============================================================================

_SIMPLE_RECORDS: dict[type, TypeAdapter] = {
    record_type: TypeAdapter(record_type)
    for record_type in (TruthRecord, ImuSample, WheelSpeedSample, StateEstimate, ControlRecord, EventRecord)
}


def record_to_dict(record: Record) -> dict[str, Any]:
    adapter = _SIMPLE_RECORDS.get(type(record))
    if adapter is not None:
        body = adapter.dump_python(record, mode="json")
        if isinstance(record, EventRecord):
            body["kind"] = record.kind.name.lower()
        return {"type": type(record).__name__, **body}

    match record:
        case CostmapFrame():
            return {
                "type": "CostmapFrame",
                "timestamp": record.timestamp,
                "spec": record.spec.model_dump(),
                "values": record.values.tolist(),
            }
        case PlanRecord():
            return {
                "type": "PlanRecord",
                "t": record.t,
                "dt": record.sequence.dt,
                "emergency": record.sequence.emergency,
                "controls": record.sequence.controls.tolist(),
            }
        case SchematicMap():
            return {
                "type": "SchematicMap",
                "width_px": record.width_px,
                "height_px": record.height_px,
                "resolution": record.resolution,
                "origin": [record.origin_x, record.origin_y],
                "track_halfwidth": record.track_halfwidth,
                "cost_sha256": hashlib.sha256(record.cost.tobytes()).hexdigest(),
            }
        case Centerline():
            return {"type": "Centerline", "closed": record.closed, "points": record.points.tolist()}
    raise InvalidInputError(f"Cannot export record of type {type(record).__name__}", field="record")


def export_jsonl(log: RunLog, path: Path) -> int:
    """Write one JSON object per line, header first; returns the number of lines."""
    header = {
        "type": "RunLogHeader",
        "version": log.header.version,
        "seed": log.header.seed,
        "scenario_sha256": log.header.scenario_hash.hex(),
        "scenario": json.loads(log.header.scenario_json),
        "truncated": log.truncated,
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for record in log.records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")
    return len(log.records) + 1
