import math
from uuid import UUID

import pandas as pd
from sqlalchemy import select
from sqlalchemy.orm import Session

from costmap_racer.db.models.sweep import CellStatus, Sweep, SweepCell
from costmap_racer.exceptions import EntityNotFoundError, InvalidInputError
from costmap_racer.services.harness import SweepGrid

CELL_COLUMNS = (
    "mean_error_m",
    "off_policy_error_m",
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
)
_INT_COLUMNS = frozenset({"laps", "crash_count", "divergence_count", "emergency_count"})


def _cell_value(column: str, value: object) -> object:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if column == "failed_to_initialize":
        return bool(value)
    if column in _INT_COLUMNS:
        return int(value)
    return float(value)


def get_sweep_by_uuid(session: Session, sweep_uuid: UUID) -> Sweep:
    """Get sweep by UUID, raises EntityNotFoundError if not found."""
    sweep = session.execute(
        select(Sweep).where(Sweep.uuid == sweep_uuid)
    ).scalar_one_or_none()

    if not sweep:
        raise EntityNotFoundError("Sweep", str(sweep_uuid))

    return sweep


def create_sweep(
    session: Session,
    grid: SweepGrid,
    rows: pd.DataFrame,
    *,
    scenario: str,
    template_seed: int,
) -> Sweep:
    """Persist a finished sweep with one cell row per replicate."""
    if rows.empty:
        raise InvalidInputError("Sweep has no result rows", field="rows")

    sweep = Sweep(
        name=grid.name,
        scenario=scenario,
        template_seed=str(template_seed),
        replicates=grid.replicates,
        grid_json=grid.model_dump_json(),
    )
    for row in rows.to_dict("records"):
        sweep.cells.append(
            SweepCell(
                cell=int(row["cell"]),
                replicate=int(row["replicate"]),
                seed=str(row["seed"]),
                overrides=row["overrides"],
                status=CellStatus(row["status"]).value,
                error=row["error"] if isinstance(row.get("error"), str) else None,
                **{column: _cell_value(column, row.get(column)) for column in CELL_COLUMNS},
            )
        )

    session.add(sweep)
    session.commit()
    session.refresh(sweep)

    return sweep


def get_sweeps(session: Session, name: str | None = None, limit: int = 20) -> list[Sweep]:
    """Most recent sweeps first, optionally filtered by name."""
    query = select(Sweep)
    if name:
        query = query.where(Sweep.name == name)
    query = query.order_by(Sweep.created_at.desc()).limit(limit)
    return list(session.execute(query).scalars().all())


def delete_sweep(session: Session, sweep_uuid: UUID) -> None:
    """Delete a sweep and its cells."""
    sweep = get_sweep_by_uuid(session, sweep_uuid)
    session.delete(sweep)
    session.commit()


def cells_frame(sweep: Sweep) -> pd.DataFrame:
    """Cell rows of a stored sweep as a DataFrame."""
    columns = ["cell", "replicate", "seed", "overrides", "status", "error", *CELL_COLUMNS]
    return pd.DataFrame(
        [{column: getattr(cell, column) for column in columns} for cell in sweep.cells],
        columns=columns,
    )
