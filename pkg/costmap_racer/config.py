from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # run artifacts
    OUTPUT_DIR: Path = Path("./runs")

    # sweep result store
    DB_URL: str = "sqlite:///./sweeps.db"
    SQLALCHEMY_ECHO: bool = False

    # parallelism
    NUMBA_THREADS: int | None = None
    SWEEP_WORKERS: int = 1

    model_config = SettingsConfigDict(
        env_prefix="RACER_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("DB_URL", mode="before")
    @classmethod
    def validate_db_url(cls, v: str) -> str:
        if not v:
            raise ValueError("DB_URL cannot be empty")
        return v

    @field_validator("SWEEP_WORKERS", mode="before")
    @classmethod
    def validate_sweep_workers(cls, v: int) -> int:
        if isinstance(v, str):
            v = int(v)
        if v <= 0:
            raise ValueError("SWEEP_WORKERS must be positive")
        return v

    @field_validator("NUMBA_THREADS", mode="before")
    @classmethod
    def validate_numba_threads(cls, v: int | None) -> int | None:
        if v is None or v == "":
            return None
        if isinstance(v, str):
            v = int(v)
        if v <= 0:
            raise ValueError("NUMBA_THREADS must be positive")
        return v


@lru_cache
def get_settings() -> Settings:
    return Settings()
