"""Entry point for the pwa CLI application.

Each subcommand runs one experiment mode over a list of seeds, writes the
reports to the output directory and prints a one-line summary per seed.
Exit codes: 0 success, 1 other failure, 2 configuration error, 3 non-finite
values in a report.
"""

import logging
from pathlib import Path
from typing import Any, cast

from dotenv import load_dotenv
import typer

from src.pwa.config import (
    Config,
    Mode,
    experiment_config,
    expand_grid,
    parse_grid,
    parse_overrides,
)
from src.pwa.context import RunContext, default_workers
from src.pwa.either import Either, attempt, exit_code_of
from src.pwa.errors import PwaError
from src.pwa.experiments import run_experiment, run_sweep

# Configure logging
LOG_DIR = Path("logs")
LOG_DIR.mkdir(exist_ok=True)
logging.basicConfig(
    filename=LOG_DIR / "pwa.log",
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

# Preset used when --preset is not given.
DEFAULT_PRESETS: dict[str, str | None] = {
    "regress": "two-mode-1d",
    "dynamics": "stable-2mode",
    "simulate": "stable-2mode",
    "adversary": "threshold-1d",
    "hard-id": "hard-id",
    "verify-smoothness": None,
    "erm-check": "erm-check",
}

app = typer.Typer(help="Online learning of smoothed piecewise-affine systems.")


@app.callback()
def main() -> None:
    """Load `.env` so that PWA_WORKERS and PWA_CONFIG_PATH apply."""
    load_dotenv()


ConfigOption = typer.Option(None, "--config", "-c", help="YAML or JSON config file")
PresetOption = typer.Option(None, "--preset", "-p", help="Preset section to use")
SetOption = typer.Option(
    [], "--set", "-s", help="Override as key=value; dotted keys reach nested sections"
)
SeedsOption = typer.Option(None, "--seeds", help="Seeds, e.g. 0..9 or 1,4,7")
OutOption = typer.Option(
    None, "--out", "-o", help="Directory for the reports (default: output_dir)"
)
WorkersOption = typer.Option(
    None, "--workers", "-w", help="Worker threads (default: PWA_WORKERS or 4)"
)
HashOption = typer.Option(
    False, "--deterministic-hash", help="Print a digest of the reports"
)
HorizonOption = typer.Option(None, "--T", help="Horizon (rounds or episodes)")


def _handle_result(result: Either[Any, PwaError]) -> int:
    """Fold a run outcome into an exit code."""
    fold_result: int = result.fold(
        on_left=lambda error: _handle_error(error),
        on_right=lambda _: 0,
    )
    return fold_result


def _handle_error(error: PwaError) -> int:
    typer.echo(f"Error: {error}", err=True)
    logger.error(f"Run failed: {error}")
    return exit_code_of(error)


def _context(out: str, workers: int | None, digest: bool) -> RunContext:
    return RunContext(
        logger=logger,
        output_dir=Path(out),
        workers=workers or default_workers(),
        deterministic_hash=digest,
    )


def _overrides(
    set_: list[str], seeds: str | None, extra: dict[str, Any]
) -> dict[str, Any]:
    overrides = parse_overrides(set_)
    if seeds is not None:
        overrides["seeds"] = seeds
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return overrides


def _load(config: str | None) -> None:
    if config is not None:
        Config.load(config)
    else:
        Config()


def execute(
    mode: Mode,
    config: str | None,
    preset: str | None,
    set_: list[str],
    seeds: str | None,
    out: str | None,
    workers: int | None,
    digest: bool,
    **extra: Any,
) -> int:
    """Build the configuration for `mode`, run it and return the exit code."""
    _load(config)
    chosen = preset or DEFAULT_PRESETS[mode]
    built = attempt(
        lambda: experiment_config(mode, chosen, _overrides(set_, seeds, extra))
    )
    result = built.flat_map(
        lambda cfg: run_experiment(
            cfg, _context(out or cfg.output_dir, workers, digest)
        )
    )
    return _handle_result(result)


def _exit(code: int) -> None:
    if code:
        raise typer.Exit(code=code)


@app.command()
def regress(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    T: int | None = HorizonOption,
) -> None:
    """Online piecewise-affine regression on a smoothed stream."""
    _exit(execute("regress", config, preset, set_, seeds, out, workers, digest, T=T))


@app.command()
def dynamics(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    T: int | None = HorizonOption,
) -> None:
    """One-step prediction of a closed-loop piecewise-affine system."""
    _exit(execute("dynamics", config, preset, set_, seeds, out, workers, digest, T=T))


@app.command()
def simulate(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    T: int | None = HorizonOption,
    H: int | None = typer.Option(None, "--H", help="Episode length"),
) -> None:
    """Simulation regret of learned dynamics over H-step episodes."""
    _exit(
        execute(
            "simulate", config, preset, set_, seeds, out, workers, digest, T=T, H=H
        )
    )


@app.command()
def adversary(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    T: int | None = HorizonOption,
    learner: str | None = typer.Option(
        None, "--learner", "-l", help="Threshold learner: halving, constant or epoch"
    ),
) -> None:
    """Threshold learners against the binary-expansion adversary."""
    _exit(
        execute(
            "adversary",
            config,
            preset,
            set_,
            seeds,
            out,
            workers,
            digest,
            T=T,
            learner=learner,
        )
    )


@app.command("hard-id")
def hard_id(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    T: int | None = HorizonOption,
) -> None:
    """Random exploration of the hidden-mode identification instance."""
    _exit(execute("hard-id", config, preset, set_, seeds, out, workers, digest, T=T))


@app.command("verify-smoothness")
def verify_smoothness(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
    channel: str | None = typer.Option(
        None, "--channel", help="gaussian, uniform_ball or point_mass"
    ),
    sigma: float | None = typer.Option(None, "--sigma", help="Channel scale"),
    n: int | None = typer.Option(None, "--n", help="Monte-Carlo sample size"),
) -> None:
    """Check a noise channel against its claimed directional smoothness."""
    _exit(
        execute(
            "verify-smoothness",
            config,
            preset,
            set_,
            seeds,
            out,
            workers,
            digest,
            channel=channel,
            sigma=sigma,
            n_samples=n,
        )
    )


@app.command("erm-check")
def erm_check(
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
) -> None:
    """Compare the alternating ERM oracle with exhaustive search in 1-D."""
    _exit(execute("erm-check", config, preset, set_, seeds, out, workers, digest))


@app.command()
def sweep(
    mode: str = typer.Argument(..., help="Experiment mode to sweep"),
    grid: list[str] = typer.Option(
        [], "--grid", "-g", help="Grid axis as key=v1,v2; repeat for more axes"
    ),
    config: str | None = ConfigOption,
    preset: str | None = PresetOption,
    set_: list[str] = SetOption,
    seeds: str | None = SeedsOption,
    out: str | None = OutOption,
    workers: int | None = WorkersOption,
    digest: bool = HashOption,
) -> None:
    """Run the Cartesian product of grid overrides and merge the summaries."""
    _load(config)
    if mode not in DEFAULT_PRESETS:
        typer.echo(f"Error: unknown mode {mode}", err=True)
        raise typer.Exit(code=2)
    chosen = preset or DEFAULT_PRESETS[mode]

    def cells() -> list[dict[str, Any]]:
        base = experiment_config(cast(Mode, mode), chosen, _overrides(set_, seeds, {}))
        return expand_grid(parse_grid(grid), base.grid_cap)

    result = attempt(cells).flat_map(
        lambda grid_cells: run_sweep(
            cast(Mode, mode),
            chosen,
            _overrides(set_, seeds, {}),
            grid_cells,
            _context(out or Config.get("output_dir", "runs"), workers, digest),
        )
    )
    _exit(_handle_result(result))


if __name__ == "__main__":
    load_dotenv()
    # Initialize Config to load the configuration file
    Config()
    app()
