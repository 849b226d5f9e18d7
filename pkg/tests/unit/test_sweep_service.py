from unittest.mock import Mock
from uuid import uuid4

import pandas as pd
import pytest

from costmap_racer.db.models.sweep import Sweep, SweepCell
from costmap_racer.exceptions import EntityNotFoundError, InvalidInputError
from costmap_racer.services.harness import SweepGrid
from costmap_racer.services.sweep_service import (
    cells_frame,
    create_sweep,
    delete_sweep,
    get_sweep_by_uuid,
)

GRID = SweepGrid(name="latency", replicates=1, parameters={"sensor.degradation.latency": [0.0, 0.1]})


def result_rows() -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "cell": 0,
                "replicate": 0,
                "seed": 2**64 - 5,
                "overrides": '{"sensor.degradation.latency": 0.0}',
                "status": "ok",
                "error": None,
                "mean_error_m": 0.25,
                "off_policy_error_m": 0.3,
                "laps": 2.0,
                "crash_count": 0,
                "failed_to_initialize": None,
            },
            {
                "cell": 1,
                "replicate": 0,
                "seed": 17,
                "overrides": '{"sensor.degradation.latency": 0.1}',
                "status": "failed",
                "error": "Map has no cell with cost below 0.5",
                "mean_error_m": float("nan"),
                "off_policy_error_m": None,
                "laps": None,
                "crash_count": None,
                "failed_to_initialize": None,
            },
        ]
    )


@pytest.mark.unit
class TestSweepLookup:
    def test_returns_stored_sweep(self):
        """The service hands back whatever the session finds."""
        mock_session = Mock()
        mock_sweep = Mock(spec=Sweep)
        mock_sweep.name = "latency"
        mock_session.execute.return_value.scalar_one_or_none.return_value = mock_sweep

        result = get_sweep_by_uuid(mock_session, uuid4())

        assert result.name == "latency"
        mock_session.execute.assert_called_once()

    def test_missing_sweep_raises(self):
        mock_session = Mock()
        mock_session.execute.return_value.scalar_one_or_none.return_value = None
        sweep_uuid = uuid4()

        with pytest.raises(EntityNotFoundError) as exc_info:
            get_sweep_by_uuid(mock_session, sweep_uuid)

        assert exc_info.value.entity_type == "Sweep"
        assert exc_info.value.identifier == str(sweep_uuid)

    def test_delete_of_missing_sweep_commits_nothing(self):
        mock_session = Mock()
        mock_session.execute.return_value.scalar_one_or_none.return_value = None

        with pytest.raises(EntityNotFoundError):
            delete_sweep(mock_session, uuid4())
        mock_session.commit.assert_not_called()


@pytest.mark.unit
class TestCreateSweep:
    def test_rows_become_cells(self):
        mock_session = Mock()
        sweep = create_sweep(mock_session, GRID, result_rows(), scenario="unit", template_seed=2**64 - 1)

        mock_session.add.assert_called_once_with(sweep)
        mock_session.commit.assert_called_once()
        assert sweep.template_seed == str(2**64 - 1)
        assert [c.cell for c in sweep.cells] == [0, 1]

    def test_cell_values_normalized(self):
        """NaN becomes NULL, counts become ints and u64 seeds are kept as text."""
        sweep = create_sweep(Mock(), GRID, result_rows(), scenario="unit", template_seed=1)
        ok, failed = sweep.cells

        assert ok.seed == str(2**64 - 5)
        assert ok.laps == 2 and isinstance(ok.laps, int)
        assert ok.error is None
        assert failed.mean_error_m is None
        assert failed.error == "Map has no cell with cost below 0.5"

    def test_empty_rows_rejected(self):
        with pytest.raises(InvalidInputError):
            create_sweep(Mock(), GRID, pd.DataFrame(), scenario="unit", template_seed=1)


@pytest.mark.unit
class TestCellsFrame:
    def test_columns_follow_cells(self):
        sweep = Sweep(name="x", scenario="unit", template_seed="1", replicates=1, grid_json="{}")
        sweep.cells.append(SweepCell(cell=0, replicate=0, seed="9", overrides="{}", status="ok", mean_error_m=0.4))

        frame = cells_frame(sweep)

        assert list(frame["seed"]) == ["9"]
        assert frame.loc[0, "mean_error_m"] == 0.4
        assert "off_policy_error_m" in frame.columns
