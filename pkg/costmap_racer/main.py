from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Optional
from uuid import UUID

import pandas as pd
import typer
from rich.console import Console
from rich.table import Table

from costmap_racer import kernels
from costmap_racer.config import Settings, get_settings
from costmap_racer.db.db import get_session
from costmap_racer.exceptions import (
    ConfigError,
    EndOfStream,
    EntityNotFoundError,
    InvalidInputError,
    MapFormatError,
    ProtocolError,
    RecordParseError,
    ServiceError,
    UnsupportedReplayError,
)
from costmap_racer.log import configure_logging
from costmap_racer.models.records import EventKind, MetricsReport, RunLog
from costmap_racer.services import harness, sweep_service
from costmap_racer.services.metrics import write_profile_csv
from costmap_racer.services.run_log import export_jsonl, read_run_log
from costmap_racer.services.schematic_map import build_map, save_centerline, save_map
from costmap_racer.services.track import synthetic_centerline

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

stdout = Console()

ScenarioOption = Annotated[Path, typer.Option("--scenario", help="Scenario YAML document")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", min=0, max=2**64 - 1, help="Override the master seed")]
OutOption = Annotated[Optional[Path], typer.Option("--out", help="Output directory (default: OUTPUT_DIR)")]
CsvOption = Annotated[bool, typer.Option("--csv", help="Also write CSV tables")]
QuietOption = Annotated[bool, typer.Option("--quiet", help="Only log warnings and errors")]
LogArgument = Annotated[Path, typer.Argument(help="Binary RunLog file")]


def exit_code_for(exc: BaseException) -> int:
    """Map a service error onto the CLI's exit codes."""
    if isinstance(exc, (ConfigError, InvalidInputError, EntityNotFoundError)):
        return EXIT_CONFIG
    if isinstance(exc, (MapFormatError, RecordParseError, ProtocolError, EndOfStream, UnsupportedReplayError, OSError)):
        return EXIT_IO
    return EXIT_RUNTIME


@contextmanager
def cli_errors() -> Iterator[None]:
    try:
        yield
    except (ServiceError, OSError) as exc:
        code = exit_code_for(exc)
        message = exc.message if isinstance(exc, ServiceError) else str(exc)
        stdout.print(f"[bold red]error:[/bold red] {message}")
        raise typer.Exit(code) from exc


def runtime_failed(log: RunLog, report: MetricsReport) -> bool:
    return bool(report.crash_count or report.divergence_count or log.events(EventKind.FAILURE))


def report_table(report: MetricsReport, title: str) -> Table:
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("value", justify="right")

    def fmt(value: float | None, digits: int = 3) -> str:
        return "-" if value is None else f"{value:.{digits}f}"

    table.add_row("duration [s]", fmt(report.duration_s, 2))
    table.add_row("mean position error [m]", fmt(report.mean_position_error_m))
    table.add_row("max position error [m]", fmt(report.max_position_error_m))
    table.add_row("laps", str(len(report.lap_times_s)))
    table.add_row("lap times [s]", ", ".join(f"{t:.2f}" for t in report.lap_times_s) or "-")
    table.add_row("mean speed [m/s]", fmt(report.mean_speed, 2))
    table.add_row("max slip angle [deg]", fmt(report.max_slip_angle_deg, 1))
    table.add_row("mean frame accuracy", fmt(report.mean_accuracy, 4))
    table.add_row("crashes / divergences", f"{report.crash_count} / {report.divergence_count}")
    table.add_row("emergency stops", str(report.emergency_count))
    if report.failed_to_initialize is not None:
        table.add_row("failed to initialize", str(report.failed_to_initialize))
    for note in report.notes:
        table.add_row("note", note)
    return table


def frame_table(frame: pd.DataFrame, title: str) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*("-" if pd.isna(v) else f"{v:.3f}" if isinstance(v, float) else str(v) for v in row))
    return table


def create_app(settings: Settings | None = None) -> typer.Typer:
    """Create and configure the CLI application."""
    if settings is None:
        settings = get_settings()

    app = typer.Typer(
        name="costmap-racer",
        help="Cost-map particle filter localization and MPPI closed-loop racing simulator.",
        no_args_is_help=True,
        add_completion=False,
    )

    def setup(quiet: bool) -> None:
        configure_logging(settings, quiet=quiet)
        kernels.configure_threads(settings.NUMBA_THREADS)

    def out_dir(out: Path | None) -> Path:
        directory = out or settings.OUTPUT_DIR
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def emit(report: MetricsReport, title: str, stem: str, out: Path | None, csv: bool, quiet: bool) -> None:
        directory = out_dir(out)
        (directory / f"{stem}.report.json").write_text(report.model_dump_json(indent=2))
        if csv:
            write_profile_csv(report, directory / f"{stem}.profile.csv")
        if not quiet:
            stdout.print(report_table(report, title))

    @app.command("build-map")
    def build_map_command(
        scenario: Annotated[Optional[Path], typer.Option("--scenario", help="Scenario YAML document")] = None,
        synthetic: Annotated[bool, typer.Option("--synthetic", help="Use the built-in reference track")] = False,
        out: OutOption = None,
        quiet: QuietOption = False,
    ) -> None:
        """Rasterize a centerline into a schematic map file."""
        setup(quiet)
        with cli_errors():
            if scenario is None and not synthetic:
                raise ConfigError("either --scenario or --synthetic is required", field="scenario")
            directory = out_dir(out)
            if scenario is not None:
                schematic, centerline = harness.build_track(harness.load_scenario(scenario).map)
            else:
                centerline = synthetic_centerline()
                schematic = build_map(centerline)
            save_map(schematic, directory / "track.smap")
            if centerline is not None:
                save_centerline(centerline, directory / "centerline.txt")
        if not quiet:
            stdout.print(
                f"map {schematic.width_px}x{schematic.height_px} px at {schematic.resolution:g} px/m "
                f"written to {directory / 'track.smap'}"
            )

    @app.command("run")
    def run_command(
        scenario: ScenarioOption,
        seed: SeedOption = None,
        out: OutOption = None,
        csv: CsvOption = False,
        quiet: QuietOption = False,
    ) -> None:
        """Drive the closed loop and write its RunLog and report."""
        setup(quiet)
        with cli_errors():
            loaded = harness.load_scenario(scenario)
            if seed is not None:
                loaded = loaded.with_seed(seed)
            result = harness.run(loaded, out_dir(out))
            emit(result.report, f"{loaded.name} (seed {loaded.seed})", result.log_path.stem, out, csv, quiet)
        if not quiet:
            stdout.print(f"log {result.log_path} sha256 {result.digest}")
        if runtime_failed(result.log, result.report):
            raise typer.Exit(EXIT_RUNTIME)

    @app.command("replay")
    def replay_command(
        log: LogArgument,
        scenario: Annotated[Optional[Path], typer.Option("--scenario", help="Take the filter section from here")] = None,
        seed: SeedOption = None,
        out: OutOption = None,
        csv: CsvOption = False,
        quiet: QuietOption = False,
    ) -> None:
        """Re-run the filter off-policy over a recorded log."""
        setup(quiet)
        with cli_errors():
            recorded = read_run_log(log)
            config = harness.load_scenario(scenario).filter if scenario is not None else None
            report = harness.replay(recorded, config, seed=seed)
            emit(report, f"replay of {log.name}", f"{log.stem}.replay", out, csv, quiet)
        if report.divergence_count:
            raise typer.Exit(EXIT_RUNTIME)

    @app.command("report")
    def report_command(
        log: LogArgument,
        out: OutOption = None,
        csv: CsvOption = False,
        quiet: QuietOption = False,
    ) -> None:
        """Compute metrics for a recorded log."""
        setup(quiet)
        with cli_errors():
            report = harness.report(log)
            emit(report, f"report of {log.name}", log.stem, out, csv, quiet)

    @app.command("sweep")
    def sweep_command(
        scenario: ScenarioOption,
        grid: Annotated[Path, typer.Option("--grid", help="Sweep grid YAML document")],
        seed: SeedOption = None,
        out: OutOption = None,
        csv: CsvOption = False,
        quiet: QuietOption = False,
    ) -> None:
        """Run a parameter grid and store the comparison table."""
        setup(quiet)
        with cli_errors():
            template = harness.load_scenario(scenario)
            if seed is not None:
                template = template.with_seed(seed)
            sweep_grid = harness.load_grid(grid)
            rows = harness.sweep(template, sweep_grid, workers=settings.SWEEP_WORKERS)
            table = harness.summarize_sweep(rows)
            with get_session(settings) as session:
                stored = sweep_service.create_sweep(
                    session, sweep_grid, rows, scenario=template.name, template_seed=template.seed
                )
                sweep_uuid = stored.uuid
            if csv:
                directory = out_dir(out)
                rows.to_csv(directory / f"{sweep_grid.name}.cells.csv", index=False)
                table.to_csv(directory / f"{sweep_grid.name}.csv", index=False)
        if not quiet:
            stdout.print(frame_table(table, f"sweep {sweep_grid.name} ({sweep_uuid})"))

    @app.command("sweeps")
    def sweeps_command(
        name: Annotated[Optional[str], typer.Option("--name", help="Only sweeps with this grid name")] = None,
        limit: Annotated[int, typer.Option("--limit", min=1, help="Most recent sweeps to list")] = 20,
        show: Annotated[Optional[UUID], typer.Option("--show", help="Print the comparison table of one sweep")] = None,
        delete: Annotated[Optional[UUID], typer.Option("--delete", help="Remove one sweep and its cells")] = None,
        out: OutOption = None,
        csv: CsvOption = False,
        quiet: QuietOption = False,
    ) -> None:
        """List, show or delete stored sweeps."""
        setup(quiet)
        with cli_errors(), get_session(settings) as session:
            if show is not None and delete is not None:
                raise ConfigError("--show and --delete are exclusive", field="show")
            if delete is not None:
                sweep_service.delete_sweep(session, delete)
                stdout.print(f"sweep {delete} deleted")
                return
            if show is not None:
                stored = sweep_service.get_sweep_by_uuid(session, show)
                cells = sweep_service.cells_frame(stored)
                table = harness.summarize_sweep(cells)
                if csv:
                    directory = out_dir(out)
                    cells.to_csv(directory / f"{stored.name}.cells.csv", index=False)
                    table.to_csv(directory / f"{stored.name}.csv", index=False)
                stdout.print(frame_table(table, f"sweep {stored.name} ({stored.uuid})"))
                return

            listing = Table(title="stored sweeps")
            for column in ("uuid", "name", "scenario", "seed", "cells", "created"):
                listing.add_column(column)
            for stored in sweep_service.get_sweeps(session, name=name, limit=limit):
                listing.add_row(
                    str(stored.uuid),
                    stored.name,
                    stored.scenario,
                    stored.template_seed,
                    str(len(stored.cells)),
                    f"{stored.created_at:%Y-%m-%d %H:%M:%S}",
                )
            stdout.print(listing)

    @app.command("export")
    def export_command(
        log: LogArgument,
        out: OutOption = None,
        quiet: QuietOption = False,
    ) -> None:
        """Convert a binary RunLog to JSON Lines."""
        setup(quiet)
        with cli_errors():
            target = out_dir(out) / f"{log.stem}.jsonl"
            lines = export_jsonl(read_run_log(log), target)
        if not quiet:
            stdout.print(f"{lines} records written to {target}")

    return app


app = create_app()
