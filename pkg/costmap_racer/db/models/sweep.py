from datetime import datetime
from enum import Enum
from uuid import UUID

from pydantic import BaseModel, ConfigDict
from sqlalchemy import Boolean, Float, ForeignKey, Integer, String, Text, Uuid
from sqlalchemy.orm import Mapped, mapped_column, relationship

from costmap_racer.db.models.base import StoredRecord


class CellStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


class Sweep(StoredRecord):
    __tablename__ = "sweep"

    name: Mapped[str] = mapped_column(String(200), nullable=False)
    scenario: Mapped[str] = mapped_column(String(200), nullable=False)
    # u64 seeds overflow a signed BIGINT
    template_seed: Mapped[str] = mapped_column(String(20), nullable=False)
    replicates: Mapped[int] = mapped_column(Integer, default=1, nullable=False)
    grid_json: Mapped[str] = mapped_column(Text, nullable=False)

    # relationships
    cells: Mapped[list["SweepCell"]] = relationship(
        "SweepCell",
        back_populates="sweep",
        cascade="all, delete-orphan",
        order_by=lambda: (SweepCell.cell, SweepCell.replicate),
    )


class SweepCell(StoredRecord):
    __tablename__ = "sweep_cell"

    cell: Mapped[int] = mapped_column(Integer, nullable=False)
    replicate: Mapped[int] = mapped_column(Integer, nullable=False)
    seed: Mapped[str] = mapped_column(String(20), nullable=False)
    overrides: Mapped[str] = mapped_column(Text, nullable=False)
    status: Mapped[str] = mapped_column(String(20), default=CellStatus.OK.value, nullable=False)
    error: Mapped[str | None] = mapped_column(Text, nullable=True)

    mean_error_m: Mapped[float | None] = mapped_column(Float, nullable=True)
    off_policy_error_m: Mapped[float | None] = mapped_column(Float, nullable=True)
    max_error_m: Mapped[float | None] = mapped_column(Float, nullable=True)
    laps: Mapped[int | None] = mapped_column(Integer, nullable=True)
    mean_lap_time_s: Mapped[float | None] = mapped_column(Float, nullable=True)
    mean_speed: Mapped[float | None] = mapped_column(Float, nullable=True)
    max_slip_angle_deg: Mapped[float | None] = mapped_column(Float, nullable=True)
    mean_accuracy: Mapped[float | None] = mapped_column(Float, nullable=True)
    crash_count: Mapped[int | None] = mapped_column(Integer, nullable=True)
    divergence_count: Mapped[int | None] = mapped_column(Integer, nullable=True)
    emergency_count: Mapped[int | None] = mapped_column(Integer, nullable=True)
    failed_to_initialize: Mapped[bool | None] = mapped_column(Boolean, nullable=True)

    # foreign keys
    sweep_uuid: Mapped[UUID] = mapped_column(Uuid(), ForeignKey("sweep.uuid"), nullable=False)

    # relationships
    sweep: Mapped["Sweep"] = relationship("Sweep", back_populates="cells")


class SweepCellResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    cell: int
    replicate: int
    seed: str
    overrides: str
    status: CellStatus
    error: str | None
    mean_error_m: float | None
    off_policy_error_m: float | None
    laps: int | None
    mean_lap_time_s: float | None
    crash_count: int | None
    divergence_count: int | None


class SweepResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    uuid: UUID
    name: str
    scenario: str
    template_seed: str
    replicates: int
    created_at: datetime
    cells: list[SweepCellResponse]
