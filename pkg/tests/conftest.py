"""Shared fixtures for the costmap_racer test suite."""

import os
from collections.abc import Generator
from pathlib import Path
from typing import Any
from uuid import uuid4

import numpy as np
import pytest
import yaml
from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import Session

from costmap_racer.config import Settings
from costmap_racer.db.models.base import Base
from costmap_racer.models.control import ControlSequence
from costmap_racer.models.filter import StateEstimate
from costmap_racer.models.geometry import Centerline, Pose2D
from costmap_racer.models.maps import PatchSpec, SchematicMap
from costmap_racer.models.records import (
    ControlRecord,
    EventKind,
    EventRecord,
    PlanRecord,
    RunLog,
    TruthRecord,
)
from costmap_racer.models.scenario import Scenario
from costmap_racer.models.sensors import CostmapFrame, ImuSample, WheelSpeedSample
from costmap_racer.services.run_log import scenario_header
from costmap_racer.services.schematic_map import build_map, extract_local_patch
from costmap_racer.services.track import synthetic_centerline

# =============================================================================
# SETTINGS AND RANDOMNESS
# =============================================================================


@pytest.fixture
def test_settings(tmp_path: Path) -> Settings:
    """Provide test settings without loading from .env."""
    return Settings(
        LOG_LEVEL="WARNING",
        OUTPUT_DIR=tmp_path / "runs",
        DB_URL=f"sqlite:///{tmp_path / 'sweeps.db'}",
        SQLALCHEMY_ECHO=False,
        SWEEP_WORKERS=1,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    """Fixed-seed generator so stochastic tests are reproducible."""
    return np.random.default_rng(12345)


# =============================================================================
# TRACKS AND MAPS
# =============================================================================


@pytest.fixture(scope="session")
def rectangle_centerline() -> Centerline:
    """20 m x 10 m closed loop with its bottom edge on y = 0."""
    return Centerline(np.array([[0.0, 0.0], [20.0, 0.0], [20.0, 10.0], [0.0, 10.0]]), closed=True)


@pytest.fixture(scope="session")
def rectangle_map(rectangle_centerline: Centerline) -> SchematicMap:
    """Coarse map of the rectangle loop: 5 px/m, 2 m halfwidth, origin (-3, -3)."""
    return build_map(rectangle_centerline, resolution=5.0, track_halfwidth=2.0, extent_margin=3.0)


@pytest.fixture(scope="session")
def synthetic_track() -> Centerline:
    return synthetic_centerline()


@pytest.fixture(scope="session")
def synthetic_map(synthetic_track: Centerline) -> SchematicMap:
    """Reference track rasterized coarsely to keep fixture setup fast."""
    return build_map(synthetic_track, resolution=5.0)


@pytest.fixture
def tiny_map() -> SchematicMap:
    """Hand-written 3 x 4 map with single-precision-exact header fields."""
    cost = np.array(
        [
            [1.0, 0.5, 0.5, 1.0],
            [0.5, 0.0, 0.0, 0.5],
            [1.0, 0.5, 0.5, 1.0],
        ],
        dtype=np.float32,
    )
    return SchematicMap(
        width_px=4,
        height_px=3,
        resolution=2.0,
        origin_x=-1.0,
        origin_y=-0.5,
        track_halfwidth=1.0,
        cost=cost,
    )


@pytest.fixture
def clean_frame(rectangle_map: SchematicMap) -> CostmapFrame:
    """Noise-free default-geometry frame seen from (8, 0) heading east."""
    patch = extract_local_patch(rectangle_map, Pose2D(8.0, 0.0, 0.0), PatchSpec())
    return CostmapFrame(timestamp=0.0, spec=PatchSpec(), values=patch.values)


# =============================================================================
# SCENARIOS
# =============================================================================


@pytest.fixture
def small_scenario_dict() -> dict[str, Any]:
    """Scenario document sized for tests: one simulated second, few particles and rollouts."""
    return {
        "schema_version": 1,
        "name": "unit",
        "seed": 3,
        "map": {"source": "synthetic", "resolution": 5.0},
        "sensor": {"kind": "synthetic", "rate": 20.0},
        "filter": {"n_particles": 200},
        "mppi": {"n_samples": 64, "horizon": 20, "dt": 0.05, "control_rate": 20.0},
        "termination": {"laps": None, "duration": 1.0},
    }


@pytest.fixture
def small_scenario(small_scenario_dict: dict[str, Any]) -> Scenario:
    return Scenario.model_validate(small_scenario_dict)


@pytest.fixture
def scenario_file(tmp_path: Path, small_scenario_dict: dict[str, Any]) -> Path:
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(small_scenario_dict))
    return path


# =============================================================================
# RUN LOGS
# =============================================================================


def straight_truth(n: int = 21, dt: float = 0.05, speed: float = 2.0) -> list[TruthRecord]:
    """Truth records for a vehicle driving east along y = 0 at constant speed."""
    return [
        TruthRecord(t=k * dt, p_x=speed * k * dt, p_y=0.0, psi=0.0, v_x=speed, v_y=0.0, yaw_rate=0.0, wheel_speed_front=speed)
        for k in range(n)
    ]


def estimates_from(truth: list[TruthRecord], dx: float = 0.0, dy: float = 0.0) -> list[StateEstimate]:
    """One estimate per truth record, offset by (dx, dy)."""
    return [
        StateEstimate(
            timestamp=r.t,
            p_x=r.p_x + dx,
            p_y=r.p_y + dy,
            psi=r.psi,
            v_x=r.v_x,
            v_y=r.v_y,
            position_std=0.1,
            ess=100.0,
        )
        for r in truth
    ]


@pytest.fixture
def default_header():
    return scenario_header(Scenario(schema_version=1, name="logged", seed=11))


@pytest.fixture
def sample_log(default_header, tiny_map: SchematicMap, rectangle_centerline: Centerline) -> RunLog:
    """A log holding one record of every kind."""
    spec = PatchSpec(width_px=3, height_px=2, resolution=4.0, longitudinal_offset=0.25)
    log = RunLog(default_header)
    log.append(tiny_map)
    log.append(rectangle_centerline)
    log.append(TruthRecord(0.0, 1.0, 2.0, 0.5, 3.0, 0.1, 0.2, 2.9))
    log.append(ImuSample(0.005, 0.1, -0.2, 9.81, 0.0, 0.0, 0.3))
    log.append(WheelSpeedSample(0.05, 2.75))
    log.append(CostmapFrame(0.05, spec, np.array([[0.0, 0.25, 0.5], [0.75, 1.0, 0.125]])))
    log.append(StateEstimate(0.05, 1.1, 2.1, 0.45, 2.9, 0.0, 0.2, 150.0))
    log.append(PlanRecord(0.05, ControlSequence(0.025, np.array([[0.1, 0.5], [0.2, 0.4]]))))
    log.append(ControlRecord(0.05, 0.1, 0.5))
    log.append(EventRecord(0.1, EventKind.LAP, "lap 1"))
    return log


# =============================================================================
# DATABASE FIXTURES (real SQLite database)
# =============================================================================


def get_worker_id() -> str:
    """Get xdist worker id for parallel test isolation."""
    return os.environ.get("PYTEST_XDIST_WORKER", "master")


def create_test_engine() -> Engine:
    """Create a fresh SQLite test database engine."""
    worker_id = get_worker_id()
    db_file = f"test_{worker_id}_{uuid4().hex}.sqlite"

    return create_engine(
        f"sqlite:///{db_file}",
        echo=False,
        connect_args={"check_same_thread": False},
    )


def setup_test_database(engine: Engine) -> None:
    """Create all tables in the test database."""
    Base.metadata.create_all(bind=engine)


def teardown_test_database(engine: Engine) -> None:
    """Drop all tables and cleanup the test database file."""
    engine.dispose()

    db_url = str(engine.url)
    if db_url.startswith("sqlite:///") and db_url != "sqlite:///:memory:":
        db_file = db_url[10:]
        for suffix in ["", "-journal", "-wal", "-shm"]:
            file_path = db_file + suffix
            if os.path.exists(file_path):
                try:
                    os.unlink(file_path)
                except Exception:
                    pass


@pytest.fixture
def db_session() -> Generator[Session, None, None]:
    """
    Database session fixture for integration tests.

    Creates a fresh SQLite database for each test, with the sweep tables.
    Auto-tears down after the test completes.
    """
    engine = create_test_engine()
    setup_test_database(engine)

    with Session(engine) as session:
        yield session
        session.rollback()

    teardown_test_database(engine)
