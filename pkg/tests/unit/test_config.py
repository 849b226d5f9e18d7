import logging
from unittest.mock import patch

import pytest
from pydantic import ValidationError
from rich.logging import RichHandler

from costmap_racer.config import Settings
from costmap_racer.log import PACKAGE_LOGGER, configure_logging


@pytest.mark.unit
class TestSettingsValidation:
    def test_empty_db_url_rejected(self):
        with pytest.raises(ValidationError, match="DB_URL cannot be empty"):
            Settings(DB_URL="")

    @pytest.mark.parametrize("workers", [0, -2])
    def test_sweep_workers_positive(self, workers: int):
        with pytest.raises(ValidationError):
            Settings(SWEEP_WORKERS=workers)

    def test_blank_thread_count_means_default(self):
        assert Settings(NUMBA_THREADS="").NUMBA_THREADS is None

    def test_environment_prefix(self, monkeypatch: pytest.MonkeyPatch):
        """Settings read RACER_-prefixed environment variables."""
        monkeypatch.setenv("RACER_SWEEP_WORKERS", "4")
        monkeypatch.setenv("RACER_LOG_LEVEL", "DEBUG")
        settings = Settings()
        assert settings.SWEEP_WORKERS == 4
        assert settings.LOG_LEVEL == "DEBUG"


@pytest.mark.unit
class TestConfigureLogging:
    def test_single_rich_handler(self, test_settings: Settings):
        configure_logging(test_settings)
        logger = configure_logging(test_settings)

        assert logger.name == PACKAGE_LOGGER
        assert len(logger.handlers) == 1
        assert isinstance(logger.handlers[0], RichHandler)
        assert logger.level == logging.WARNING

    def test_quiet_overrides_level(self):
        settings = Settings(LOG_LEVEL="DEBUG")
        assert configure_logging(settings, quiet=True).level == logging.WARNING
        assert configure_logging(settings).level == logging.DEBUG

    def test_defaults_to_cached_settings(self, test_settings: Settings):
        with patch("costmap_racer.log.get_settings", return_value=test_settings) as get_settings:
            configure_logging()
        get_settings.assert_called_once()
