from costmap_racer.db.models.base import Base
from costmap_racer.db.models.sweep import CellStatus, Sweep, SweepCell, SweepCellResponse, SweepResponse

__all__ = [
    "Base",
    "CellStatus",
    "Sweep",
    "SweepCell",
    "SweepCellResponse",
    "SweepResponse",
]
