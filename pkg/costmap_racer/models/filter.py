from dataclasses import dataclass
from typing import Annotated, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from costmap_racer.models.geometry import wrap_angle
from costmap_racer.models.maps import PatchSpec

# ParticleSet.states columns
PX, PY, PSI, VX, VY = range(5)
STATE_DIM = 5


@dataclass(frozen=True, slots=True)
class ParticleState:
    p_x: float
    p_y: float
    psi: float
    v_x: float
    v_y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.psi, self.v_x, self.v_y], dtype=np.float64)


@dataclass(eq=False)
class ParticleSet:
    """N weighted hypotheses; ``states`` is (N, 5) in PX, PY, PSI, VX, VY order."""

    states: np.ndarray
    log_weights: np.ndarray
    normalized: bool = True

    @property
    def n(self) -> int:
        return len(self.states)

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def particle(self, index: int) -> ParticleState:
        return ParticleState(*(float(v) for v in self.states[index]))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.states.copy(), self.log_weights.copy(), self.normalized)

    @classmethod
    def uniform(cls, states: np.ndarray) -> "ParticleSet":
        n = len(states)
        return cls(states, np.full(n, -np.log(n)), normalized=True)


class FilterConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_particles: int = Field(default=6400, ge=1)

    # diffusion, per sqrt(s)
    sigma_psi: float = Field(default=0.275, ge=0)
    sigma_vx: float = Field(default=0.75, ge=0)
    sigma_vy: float = Field(default=0.75, ge=0)

    sigma_wheel: float = Field(default=2.5, gt=0)
    wheel_exponent: Literal["variance", "printed"] = "variance"
    lambda_costmap: float = Field(default=8.0, gt=0)
    # a frame no particle matches within this patch error counts as divergence; None disables
    collapse_mae: float | None = Field(default=0.45, gt=0, le=1)

    propagate_rate: float = Field(default=200.0, gt=0)
    measurement_rate: float = Field(default=20.0, gt=0)
    resample_rate: float = Field(default=5.0, gt=0)

    patch: PatchSpec = Field(default_factory=PatchSpec.comparison)

    resampling: Literal["systematic", "stratified", "multinomial"] = "systematic"
    resample_schedule: Literal["adaptive", "strict"] = "adaptive"
    ess_fraction: float = Field(default=0.5, gt=0, le=1)

    transport_terms: bool = True
    use_costmap: bool = True
    use_wheel: bool = True

    @model_validator(mode="after")
    def check_rates(self) -> "FilterConfig":
        if not self.propagate_rate >= self.measurement_rate >= self.resample_rate:
            raise ValueError("rates must satisfy propagate_rate >= measurement_rate >= resample_rate")
        for name, ratio in (
            ("measurement_rate", self.propagate_rate / self.measurement_rate),
            ("resample_rate", self.propagate_rate / self.resample_rate),
        ):
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"propagate_rate must be an integer multiple of {name}")
        return self

    @property
    def steps_per_measurement(self) -> int:
        return round(self.propagate_rate / self.measurement_rate)

    @property
    def steps_per_resample(self) -> int:
        return round(self.propagate_rate / self.resample_rate)


class KnownPosePrior(BaseModel):
    """Gaussian prior over (p_x, p_y, psi, v_x, v_y)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["known_pose"] = "known_pose"
    mean: tuple[float, float, float, float, float]
    covariance: tuple[tuple[float, ...], ...] | None = None

    @model_validator(mode="after")
    def check_covariance(self) -> "KnownPosePrior":
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64)
            if cov.shape != (STATE_DIM, STATE_DIM):
                raise ValueError("covariance must be 5x5")
            if not np.allclose(cov, cov.T):
                raise ValueError("covariance must be symmetric")
            if np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                raise ValueError("covariance must be positive semi-definite")
        return self

    @classmethod
    def from_std(cls, mean: tuple[float, ...], std: tuple[float, ...]) -> "KnownPosePrior":
        cov = np.diag(np.square(np.asarray(std, dtype=np.float64)))
        return cls(mean=tuple(mean), covariance=tuple(tuple(row) for row in cov.tolist()))

    def covariance_matrix(self) -> np.ndarray:
        if self.covariance is None:
            return np.zeros((STATE_DIM, STATE_DIM))
        return np.asarray(self.covariance, dtype=np.float64)


class UniformOnTrackPrior(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["uniform"] = "uniform"
    max_cost: float = Field(default=0.5, gt=0, le=1)


Prior = Annotated[KnownPosePrior | UniformOnTrackPrior, Field(discriminator="kind")]


@dataclass(frozen=True, slots=True)
class StateEstimate:
    timestamp: float
    p_x: float
    p_y: float
    psi: float
    v_x: float
    v_y: float
    position_std: float
    ess: float
