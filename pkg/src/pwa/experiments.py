"""Experiment runners: one function per mode, a seed pool and report emission."""

from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import UTC, datetime
import hashlib
import math
from typing import Any

from anyio import CapacityLimiter, create_task_group, run, to_thread
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    Progress,
    SpinnerColumn,
    TaskProgressColumn,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

from src.pwa.config import (
    DynamicsInstanceSpec,
    ExperimentConfig,
    Mode,
    RegressionInstanceSpec,
    experiment_config,
    merge_sections,
)
from src.pwa.context import RunContext
from src.pwa.core import make_rng
from src.pwa.dynamics import one_step_prediction_run
from src.pwa.either import Either, Left, Right, attempt
from src.pwa.erm import ErmSettings, brute_force_erm, fit_heuristic
from src.pwa.errors import ConfigError, InsufficientDataError, NumericalError, PwaError
from src.pwa.generators import (
    adversarial_threshold_stream,
    emit_stream,
    explore_hard_instance,
    hard_identification_instance,
)
from src.pwa.learner import make_threshold_learner, play_threshold_game, run as learn
from src.pwa.metrics import (
    SCHEMA_VERSION,
    RunReport,
    aggregate_reports,
    mistake_accounting,
    recovery_curve,
    stable_hash,
)
from src.pwa.simulation import SimRegReport, simulation_regret
from src.pwa.smoothing import NoiseChannel, estimate_directional_smoothness
from src.pwa.store import ReportStore

# Tolerances of the ERM cross-check.
ERM_MATCH_TOL = 1e-6
ERM_BEAT_TOL = 1e-9
ERM_MATCH_SHARE = 0.95


class TrialReport(BaseModel):
    """Report of a mode made of independent trials rather than a stream."""

    schema_version: int = SCHEMA_VERSION
    mode: str
    seed: int
    config: dict[str, Any] = Field(default_factory=dict)
    trials: list[dict[str, Any]] = Field(default_factory=list)
    values: dict[str, float] = Field(default_factory=dict)
    passed: bool | None = None
    created_at: str = Field(default_factory=lambda: datetime.now(UTC).isoformat())

    def has_nan(self) -> bool:
        numbers: list[Any] = list(self.values.values())
        for trial in self.trials:
            numbers.extend(v for v in trial.values() if isinstance(v, int | float))
        return any(not math.isfinite(float(v)) for v in numbers)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trials)

    def summary(self) -> dict[str, float]:
        row = {"seed": float(self.seed), **self.values}
        if self.passed is not None:
            row["passed"] = float(self.passed)
        return row


Report = RunReport | SimRegReport | TrialReport


@dataclass
class SeedOutcome:
    """Everything one seed produced."""

    seed: int
    report: Report
    line: str
    artifacts: dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def summary(self) -> dict[str, float]:
        return self.report.summary()


@dataclass
class ExperimentResult:
    """Merged outcome of all seeds of one configuration."""

    config: ExperimentConfig
    outcomes: list[SeedOutcome]
    summary: pd.DataFrame
    digest: str


def _regression_spec(config: ExperimentConfig) -> RegressionInstanceSpec:
    if not isinstance(config.instance, RegressionInstanceSpec):
        raise ConfigError(f"{config.mode} needs a regression instance")
    return config.instance


def _dynamics_spec(config: ExperimentConfig) -> DynamicsInstanceSpec:
    if not isinstance(config.instance, DynamicsInstanceSpec):
        raise ConfigError(f"{config.mode} needs a dynamics instance")
    return config.instance


def _recovery_extras(report: RunReport, d: int) -> None:
    try:
        report.extras["recovery_slope"] = recovery_curve(report, d).slope
    except InsufficientDataError:
        pass
    report.extras["mistake_accounting"] = float(mistake_accounting(report))


def run_regress(config: ExperimentConfig, seed: int) -> SeedOutcome:
    spec = _regression_spec(config)
    model = spec.build(make_rng(seed, 0))
    stream = emit_stream(model, spec.policy(), config.T, make_rng(seed, 1))
    report = learn(
        stream.x,
        stream.y,
        spec.K,
        config.learner_bound(),
        config.hinge(spec.K, spec.d, spec.m),
        config.erm(),
        make_rng(seed, 2),
        model.truth(),
        seed=seed,
        mode="regress",
        echo=config.echo(),
    )
    report.extras["clip_rate"] = stream.clip_rate
    _recovery_extras(report, spec.d)
    line = (
        f"seed {seed}: regret/T={report.total_regret / config.T:.4g} "
        f"mistakes={report.mistake_rate:.3f} epochs={len(report.checkpoints)}"
    )
    artifacts = {"stream": stream.to_frame()}
    return SeedOutcome(seed=seed, report=report, line=line, artifacts=artifacts)


def run_dynamics(config: ExperimentConfig, seed: int) -> SeedOutcome:
    spec = _dynamics_spec(config)
    dyn = spec.build()
    artifacts: dict[str, pd.DataFrame] = {}
    width = dyn.state_dim + dyn.input_dim
    report = one_step_prediction_run(
        dyn,
        spec.feedback(dyn),
        config.T,
        config.hinge(dyn.K, width, dyn.state_dim),
        config.erm(),
        make_rng(seed),
        bound=config.learner_bound(),
        seed=seed,
        echo=config.echo(),
        sink=lambda trajectory: artifacts.update(trajectory=trajectory.to_frame()),
    )
    _recovery_extras(report, width)
    line = (
        f"seed {seed}: excess/T={report.total_regret / config.T:.4g} "
        f"mistakes={report.mistake_rate:.3f} epochs={len(report.checkpoints)}"
    )
    return SeedOutcome(seed=seed, report=report, line=line, artifacts=artifacts)


def run_simulate(config: ExperimentConfig, seed: int) -> SeedOutcome:
    spec = _dynamics_spec(config)
    dyn = spec.build()
    hinge = config.hinge(
        dyn.K, dyn.state_dim + dyn.input_dim, dyn.state_dim, T=config.T * config.H
    )
    if hinge.epoch_length % config.H:
        # Epochs end on episode boundaries.
        length = min(config.T, math.ceil(hinge.epoch_length / config.H)) * config.H
        hinge = hinge.model_copy(update={"epoch_length": length})
    report = simulation_regret(
        dyn,
        spec.open_loop(dyn),
        spec.initial(dyn),
        config.T,
        config.H,
        hinge,
        config.erm(),
        make_rng(seed),
        bound=config.learner_bound(),
        n_rollouts=config.rollouts,
        eval_every=config.eval_every,
        projection=config.projection,
        seed=seed,
        echo=config.echo(),
    )
    line = (
        f"seed {seed}: simulation regret={report.total:.4g} "
        f"W2 first/last tenth={report.window_median(0.1, last=False):.4g}"
        f"/{report.window_median(0.1, last=True):.4g}"
    )
    return SeedOutcome(seed=seed, report=report, line=line)


def run_adversary(config: ExperimentConfig, seed: int) -> SeedOutcome:
    stream = adversarial_threshold_stream(config.T, make_rng(seed, 0))
    learner = make_threshold_learner(
        config.learner, config.T, config.erm(), make_rng(seed, 1)
    )
    mistakes = play_threshold_game(stream.xs, stream.labels, learner)
    # Labels are noise-free, so the squared excess of a 0/1 guess is the mistake.
    report = RunReport(
        mode="adversary",
        seed=seed,
        config=config.echo(),
        regret=[float(m) for m in mistakes],
        mistakes=mistakes,
        epochs=[0] * len(mistakes),
        extras={"theta": float(stream.theta), "learner": config.learner},
    )
    line = f"seed {seed}: mistake rate={report.mistake_rate:.3f} ({config.learner})"
    return SeedOutcome(seed=seed, report=report, line=line)


def run_hard_id(config: ExperimentConfig, seed: int) -> SeedOutcome:
    rng = make_rng(seed)
    N = config.hard_n
    trials = []
    for _ in range(config.hard_runs):
        j = int(rng.integers(1, 2 * N + 1))
        iota = int(rng.choice([-1, 1]))
        dyn = hard_identification_instance(N, j, iota, config.hard_mass)
        result = explore_hard_instance(dyn, config.T, rng)
        trials.append({"j": j, "iota": iota, **result.model_dump()})
    failure_rate = float(np.mean([t["failed"] for t in trials]))
    floor = max(0.0, 0.5 * (1.0 - config.T / N))
    report = TrialReport(
        mode="hard-id",
        seed=seed,
        config=config.echo(),
        trials=trials,
        values={"failure_rate": failure_rate, "floor": floor},
        passed=failure_rate >= floor,
    )
    line = (
        f"seed {seed}: failure rate={failure_rate:.3f} over {len(trials)} runs "
        f"(floor {floor:.3f})"
    )
    return SeedOutcome(seed=seed, report=report, line=line)


def _channel(config: ExperimentConfig) -> NoiseChannel:
    match config.channel:
        case "gaussian" | "uniform_ball":
            return NoiseChannel(
                kind=config.channel, dimension=config.dimension, sigma=config.sigma
            )
        case "point_mass":
            return NoiseChannel(
                kind="point_mass",
                dimension=config.dimension,
                claimed_sigma_dir=config.sigma or 1.0,
            )
        case _:
            raise ConfigError("custom channels cannot be built from a config file")


def run_verify_smoothness(config: ExperimentConfig, seed: int) -> SeedOutcome:
    channel = _channel(config)
    result = estimate_directional_smoothness(
        channel,
        np.zeros(config.dimension),
        config.n_samples,
        config.n_directions,
        make_rng(seed),
        tolerance=config.tolerance,
        convention=config.convention,
    )
    report = TrialReport(
        mode="verify-smoothness",
        seed=seed,
        config=config.echo(),
        trials=[result.model_dump()],
        values={
            "sigma_dir": result.sigma_dir,
            "worst_density": result.worst_density,
            "bound": result.bound,
        },
        passed=result.passed,
    )
    verdict = "PASS" if result.passed else "FAIL"
    line = (
        f"{verdict} {config.channel} sigma={config.sigma:g}: measured density "
        f"{result.worst_density:.4f} vs {result.bound:.4f} "
        f"(sigma_dir={result.sigma_dir:.4f}, n={config.n_samples})"
    )
    return SeedOutcome(seed=seed, report=report, line=line)


def _erm_instance(
    rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Two noisy lines on [-1, 1] split at a random threshold."""
    x = rng.uniform(-1.0, 1.0, size=(n, 1))
    maps = rng.normal(size=(2, 2))
    threshold = rng.uniform(-0.5, 0.5)
    mode = (x[:, 0] > threshold).astype(int)
    y = maps[mode, 0] * x[:, 0] + maps[mode, 1] + 0.1 * rng.normal(size=n)
    return x, y[:, None]


def run_erm_check(config: ExperimentConfig, seed: int) -> SeedOutcome:
    rng = make_rng(seed)
    settings = ErmSettings(
        restarts=config.restarts,
        max_iter=config.max_iter,
        classifier_steps=config.classifier_steps,
        solver=config.solver,
    )
    trials = []
    for instance in range(config.instances):
        x, y = _erm_instance(rng, config.n_points)
        heuristic = fit_heuristic(x, y, 2, math.inf, settings, rng)
        exact = brute_force_erm(x, y, 2, math.inf)
        trials.append(
            {
                "instance": instance,
                "heuristic": heuristic.objective,
                "exact": exact.objective,
                "matched": heuristic.objective <= exact.objective + ERM_MATCH_TOL,
                "beaten": heuristic.objective < exact.objective - ERM_BEAT_TOL,
            }
        )
    matched = sum(t["matched"] for t in trials)
    beaten = sum(t["beaten"] for t in trials)
    report = TrialReport(
        mode="erm-check",
        seed=seed,
        config=config.echo(),
        trials=trials,
        values={"matched": float(matched), "beaten": float(beaten)},
        passed=matched >= ERM_MATCH_SHARE * len(trials) and beaten == 0,
    )
    line = f"seed {seed}: {matched}/{len(trials)} matched, {beaten} beaten"
    return SeedOutcome(seed=seed, report=report, line=line)


Runner = Callable[[ExperimentConfig, int], SeedOutcome]

RUNNERS: dict[Mode, Runner] = {
    "regress": run_regress,
    "dynamics": run_dynamics,
    "simulate": run_simulate,
    "adversary": run_adversary,
    "hard-id": run_hard_id,
    "verify-smoothness": run_verify_smoothness,
    "erm-check": run_erm_check,
}


def _finite(outcome: SeedOutcome) -> Either[SeedOutcome, PwaError]:
    if outcome.report.has_nan():
        message = f"Non-finite value in report of seed {outcome.seed}"
        return Left(NumericalError(message))
    return Right(outcome)


def run_seed(config: ExperimentConfig, seed: int) -> Either[SeedOutcome, PwaError]:
    """Run one seed, capturing failures and rejecting reports with NaNs."""
    return attempt(RUNNERS[config.mode], config, seed).flat_map(_finite)


async def _run_pool(
    config: ExperimentConfig, context: RunContext, progress: Progress
) -> None:
    limiter = CapacityLimiter(context.workers)
    task = progress.add_task(f"Running {config.mode}...", total=len(config.seeds))

    async def one(seed: int) -> None:
        outcome = await to_thread.run_sync(run_seed, config, seed, limiter=limiter)
        context.store.add(seed, outcome)
        progress.update(task, advance=1)

    async with create_task_group() as group:
        for seed in config.seeds:
            group.start_soon(one, seed)


def combined_digest(reports: list[Report]) -> str:
    """SHA-256 over the per-seed hashes in seed order."""
    joined = "\n".join(stable_hash(report) for report in reports)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def write_outcome(outcome: SeedOutcome, context: RunContext) -> None:
    """Write ``report_<seed>.json``, ``series_<seed>.csv`` and any artifacts."""
    seed = outcome.seed
    (context.output_dir / f"report_{seed}.json").write_text(
        outcome.report.model_dump_json(indent=2)
    )
    outcome.report.to_frame().to_csv(
        context.output_dir / f"series_{seed}.csv", index=False
    )
    for name, frame in outcome.artifacts.items():
        frame.to_csv(context.output_dir / f"{name}_{seed}.csv", index=False)


def create_results_table(outcomes: list[SeedOutcome], mode: str) -> Table:
    """Create a rich table with one row per seed."""
    table = Table(title=f"Results: {mode}", show_lines=False)
    columns = [k for k in outcomes[0].summary if k != "seed"] if outcomes else []

    table.add_column("Seed", style="cyan", no_wrap=True)
    for column in columns:
        table.add_column(column, justify="right")

    for outcome in outcomes:
        row = outcome.summary
        table.add_row(
            str(outcome.seed),
            *(f"{row[c]:.4g}" if c in row else "-" for c in columns),
        )

    return table


def create_summary_panel(result: ExperimentResult, failures: int) -> Panel:
    """Create a summary panel with the mean of every summary column."""
    config = result.config
    summary = result.summary
    seeds = f"[bold]Seeds:[/bold] {len(config.seeds)}"
    if failures:
        seeds += f" ([red]{failures} failed[/red])"
    lines = [
        f"[bold]Mode:[/bold] {config.mode}",
        f"[bold]Preset:[/bold] {config.preset or '-'}",
        seeds,
    ]
    means = summary[summary["seed"] == "mean"] if "seed" in summary else summary
    if not means.empty:
        lines.append("")
        lines.append("[bold]Means:[/bold]")
        for column in means.columns:
            if column == "seed":
                continue
            lines.append(f"  • {column}: {float(means[column].iloc[0]):.6g}")
    if result.digest:
        lines.append("")
        lines.append(f"[bold]Digest:[/bold] {result.digest}")

    return Panel(
        "\n".join(lines),
        title="Experiment Summary",
        border_style="blue",
        padding=(1, 2),
    )


def _worst(errors: list[PwaError]) -> PwaError:
    return max(errors, key=lambda e: e.exit_code)


def run_experiment(
    config: ExperimentConfig, context: RunContext
) -> Either[ExperimentResult, PwaError]:
    """Run every seed of `config` in the worker pool and emit the reports.

    Outputs go to `context.output_dir`: one JSON report and one CSV series per
    seed plus ``summary.csv``. Outcomes are merged in seed order, so the
    files do not depend on which worker finished first.
    """
    console = context.console
    context.output_dir.mkdir(parents=True, exist_ok=True)
    context.logger.info(
        f"Running {config.mode} preset={config.preset} seeds={config.seeds} "
        f"workers={context.workers}"
    )

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        run(_run_pool, config, context, progress, backend="asyncio")

    outcomes: list[SeedOutcome] = []
    errors: list[PwaError] = []
    for seed, outcome in context.store.ordered():
        match outcome:
            case Right(value):
                write_outcome(value, context)
                console.print(value.line)
                outcomes.append(value)
            case Left(error):
                console.print(f"[red]seed {seed}: {error}[/red]")
                context.logger.error(f"Seed {seed} failed: {error}")
                errors.append(error)

    summary = aggregate_reports([o.summary for o in outcomes])
    summary.to_csv(context.output_dir / "summary.csv", index=False)
    digest = combined_digest([o.report for o in outcomes])
    result = ExperimentResult(
        config=config, outcomes=outcomes, summary=summary, digest=digest
    )

    if outcomes:
        console.print(create_results_table(outcomes, config.mode))
    console.print(create_summary_panel(result, len(errors)))
    if context.deterministic_hash:
        console.print(digest)

    if errors:
        return Left(_worst(errors))
    return Right(result)


def run_sweep(
    mode: Mode,
    preset: str | None,
    overrides: dict[str, Any],
    cells: list[dict[str, Any]],
    context: RunContext,
) -> Either[pd.DataFrame, PwaError]:
    """Run the base configuration once per grid cell and merge the means.

    Each cell writes into ``cell_<i>`` below the output directory; the merged
    table, one row per cell with its overrides flattened into columns, goes to
    ``sweep_summary.csv``.
    """
    rows = []
    for index, cell in enumerate(cells):
        config = attempt(
            experiment_config, mode, preset, merge_sections(overrides, cell)
        )
        if isinstance(config, Left):
            return config
        assert isinstance(config, Right)
        cell_context = context.model_copy(
            update={
                "output_dir": context.output_dir / f"cell_{index}",
                "store": ReportStore(),
            }
        )
        context.console.print(f"[bold blue]Cell {index}:[/bold blue] {cell or 'base'}")
        outcome = run_experiment(config.value, cell_context)
        if isinstance(outcome, Left):
            return outcome
        assert isinstance(outcome, Right)
        summary = outcome.value.summary
        row = {"cell": index, **_flatten(cell)}
        if "seed" in summary:
            means = summary[summary["seed"] == "mean"].drop(columns=["seed"])
            row.update(means.iloc[0].to_dict())
        rows.append(row)

    frame = pd.DataFrame(rows)
    context.output_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(context.output_dir / "sweep_summary.csv", index=False)
    return Right(frame)


def _flatten(cell: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in cell.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat
