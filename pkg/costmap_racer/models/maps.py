from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class PatchSpec(BaseModel):
    """Geometry of an egocentric raster.

    The vehicle sits at the bottom-center of the raster facing up (row 0 is
    farthest ahead). ``longitudinal_offset`` is the distance from the vehicle
    origin to the bottom edge of the raster.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    width_px: int = Field(default=40, gt=0, le=65535)
    height_px: int = Field(default=56, gt=0, le=65535)
    resolution: float = Field(default=8.0, gt=0)
    longitudinal_offset: float = 0.0

    @classmethod
    def comparison(cls) -> "PatchSpec":
        """Filter comparison patch: 35 rows x 25 columns over the same 5 m x 7 m footprint."""
        return cls(width_px=25, height_px=35, resolution=5.0)

    @classmethod
    def planning(cls) -> "PatchSpec":
        """Direct-driving frame: 160 x 128 px at 15 px/m."""
        return cls(width_px=128, height_px=160, resolution=15.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px

    @property
    def size(self) -> int:
        return self.width_px * self.height_px

    @property
    def footprint(self) -> tuple[float, float]:
        """(width, length) in meters."""
        return self.width_px / self.resolution, self.height_px / self.resolution


@dataclass(frozen=True, eq=False)
class SchematicMap:
    """Global raster of track cost in [0, 1].

    Cell (row r, col c) is centered on world point
    (origin_x + c / resolution, origin_y + r / resolution).
    """

    width_px: int
    height_px: int
    resolution: float
    origin_x: float
    origin_y: float
    track_halfwidth: float
    cost: np.ndarray

    def __post_init__(self) -> None:
        cost = np.ascontiguousarray(self.cost, dtype=np.float32)
        if cost.shape != (self.height_px, self.width_px):
            raise ValueError(f"cost grid shape {cost.shape} does not match {self.height_px}x{self.width_px}")
        cost.flags.writeable = False
        object.__setattr__(self, "cost", cost)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return self.origin_x + col / self.resolution, self.origin_y + row / self.resolution

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SchematicMap):
            return NotImplemented
        return (
            self.width_px == other.width_px
            and self.height_px == other.height_px
            and self.resolution == other.resolution
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
            and self.track_halfwidth == other.track_halfwidth
            and np.array_equal(self.cost, other.cost)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LocalPatch:
    spec: PatchSpec
    values: np.ndarray
    validity: np.ndarray
