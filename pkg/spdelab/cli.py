from __future__ import annotations

import enum
import json
import pathlib
from typing import Any, Callable, List, Optional, Sequence, Type, Union

import click
import loguru
import typer

# Expose helpers
from tabulate import tabulate

import spdelab
import spdelab.logging
from spdelab.checks import Check
from spdelab.coefficients import list_presets, make_preset, validate_assumptions
from spdelab.configuration import RunConfig, load_config
from spdelab.errors import BaseError, ConfigurationError, NonConvergenceError, ReportError
from spdelab.experiments import (
    ScalingReport,
    run_boundedness_study,
    run_clt_study,
    run_controlled_convergence,
    run_girsanov_probe,
    run_mdp_study,
    run_moment_scaling,
    run_weak_continuity_probe,
)
from spdelab.kernels import KernelReport, kernel_property_report
from spdelab.rate_fn import RateResult, gaussian_rate_oracle, min_norm_control
from spdelab.reports import emit_report
from spdelab.solver import solve_deterministic
from spdelab.types import ExperimentName
from spdelab.utilities import join_to_series

__all__ = ("CLI", "LabCLI", "execute", "print_table", "run_from_config")

Report = Union[ScalingReport, KernelReport, RateResult]


class LogLevel(str, enum.Enum):
    trace = "TRACE"
    debug = "DEBUG"
    info = "INFO"
    success = "SUCCESS"
    warning = "WARNING"
    error = "ERROR"
    critical = "CRITICAL"


class VersionOutputFormat(str, enum.Enum):
    text = "text"
    json = "json"


class OrderedGroup(click.Group):
    """Lists commands in registration order rather than alphabetically."""

    def list_commands(self, ctx: click.Context) -> List[str]:
        return list(self.commands)


class CLI(typer.Typer, spdelab.logging.Mixin):
    def __init__(
        self,
        *args,
        name: Optional[str] = None,
        help: Optional[str] = None,
        command_type: Optional[Type[click.Command]] = None,
        callback: Optional[Callable] = typer.models.Default(None),
        **kwargs,
    ) -> None: # noqa: D107
        if command_type is None:
            command_type = OrderedGroup
        if isinstance(callback, typer.models.DefaultPlaceholder):
            callback = self.root_callback
        super().__init__(*args, name=name, help=help, cls=command_type, callback=callback, **kwargs)

    def add_cli(self, cli: "CLI", *args, **kwargs) -> None:
        if not isinstance(cli, CLI):
            raise ValueError(f"Cannot add cli of type '{cli.__class__}: not a spdelab.cli.CLI")
        return self.add_typer(cli, *args, **kwargs)

    @staticmethod
    def root_callback(
        log_level: LogLevel = typer.Option(
            LogLevel.info,
            "--log-level",
            "-l",
            envvar="SPDELAB_LOG_LEVEL",
            show_envvar=True,
            help="Set the log level",
        ),
        no_color: Optional[bool] = typer.Option(
            None,
            "--no-color",
            envvar=["SPDELAB_NO_COLOR", "NO_COLOR"],
            help="Disable colored output",
        ),
    ) -> None:
        spdelab.logging.set_level(log_level.value)
        spdelab.logging.set_colors(not no_color)


class LabCLI(CLI):
    """
    Provides the top-level commandline interface for running experiments.
    """

    def __init__(
        self,
        *args,
        name: Optional[str] = "spdelab",
        add_completion: bool = True,
        no_args_is_help: bool = True,
        **kwargs,
    ) -> None: # noqa: D107
        super().__init__(*args, name=name, add_completion=add_completion, no_args_is_help=no_args_is_help, **kwargs)
        self.add_commands()

    @property
    def logger(self) -> loguru.Logger:
        return spdelab.logging.logger

    def add_commands(self) -> None:
        self.add_run_commands()
        self.add_config_commands()
        self.add_preset_commands()
        self.add_other_commands()

    def add_run_commands(self) -> None:
        @self.command()
        def run(
            config: pathlib.Path = typer.Option(
                ...,
                "--config",
                "-c",
                exists=True,
                file_okay=True,
                dir_okay=False,
                readable=True,
                help="Experiment configuration (JSON or YAML)",
            ),
            out: Optional[pathlib.Path] = typer.Option(
                None, "--out", "-o", file_okay=False, help="Report directory (overrides the config)"
            ),
            seed: Optional[int] = typer.Option(None, "--seed", min=0, help="Base seed (overrides the config)"),
            threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Worker threads for replica blocks"),
        ) -> None:
            """Run the experiment named in a configuration and write its reports"""
            raise typer.Exit(run_from_config(config, out=out, seed=seed, threads=threads))

    def add_config_commands(self) -> None:
        @self.command()
        def validate(
            config: pathlib.Path = typer.Option(
                ...,
                "--config",
                "-c",
                exists=True,
                file_okay=True,
                dir_okay=False,
                readable=True,
                help="Configuration file to validate",
            ),
            quiet: bool = typer.Option(False, "--quiet", "-q", help="Do not echo the assumption checks"),
        ) -> None:
            """Validate a configuration and the assumptions of its preset"""
            try:
                run_config = load_config(config)
            except ConfigurationError as error:
                typer.echo(f"X Invalid configuration in {config}", err=True)
                typer.echo(error, err=True)
                raise typer.Exit(1)

            typer.echo(f"√ Valid configuration in {config}")
            report = validate_assumptions(
                make_preset(run_config.preset), horizon_T=run_config.grid.horizon_T
            )
            if not quiet:
                table = [[check.name, _check_status_to_str(check), check.message or ""] for check in report.checks]
                print_table(table, ["CHECK", "STATUS", "MESSAGE"])
            if not report.passed:
                typer.echo(f"X Preset '{run_config.preset.value}' violates its declared assumptions", err=True)
                raise typer.Exit(1)

    def add_preset_commands(self) -> None:
        presets_cli = CLI(name="presets", help="Inspect coefficient presets", callback=None)

        @presets_cli.command("list")
        def list_() -> None:
            """List the coefficient presets"""
            table = [[info.name.value, info.growth_K, info.lipschitz_L, info.description] for info in list_presets()]
            print_table(table, ["NAME", "K", "L", "DESCRIPTION"])

        self.add_cli(presets_cli, name="presets")

    def add_other_commands(self) -> None:
        @self.command()
        def version(
            format: VersionOutputFormat = typer.Option(
                VersionOutputFormat.text, "--format", "-f", help="Select output format"
            ),
        ) -> None:
            """
            Display version
            """
            if format == VersionOutputFormat.json:
                typer.echo(json.dumps({"name": "spdelab", "version": spdelab.__version__}, indent=2))
            else:
                typer.echo(f"spdelab v{spdelab.__version__}")


def print_table(table: Sequence[Sequence[Any]], headers: Sequence[str]) -> None:
    typer.echo(tabulate(table, headers, tablefmt="plain") + "\n")


def _check_status_to_str(check: Check) -> str:
    if check.success:
        return "√ PASSED"
    else:
        if check.warning:
            return "! WARNING"
        else:
            return "X FAILED"


def _rate_eval(config: RunConfig) -> RateResult:
    study = config.to_study()
    grid, coefficients = study.grid, study.coefficients
    scheme = study.scheme_for(0.0)
    u0_path = solve_deterministic(study.initial_profile, coefficients, grid, scheme)
    target = config.rate.build(grid)
    result = min_norm_control(
        target, u0_path, coefficients, grid, tol=config.rate.tol, max_iter=config.rate.max_iter, scheme=scheme
    )
    if coefficients.is_additive():
        oracle = gaussian_rate_oracle(target, grid.horizon_T, config.rate.oracle_modes, coefficients)
        spdelab.logging.logger.info(f"rate {result.rate_value:.6g} against Gaussian oracle {oracle:.6g}")
    return result


def execute(config: RunConfig) -> Report:
    """Run the experiment a configuration selects and return its report."""
    experiment = config.experiment
    if experiment == ExperimentName.kernel_report:
        return kernel_property_report(config.kernel.build(), config.kernel.t_samples, config.kernel.x_samples)
    if experiment == ExperimentName.rate_eval:
        return _rate_eval(config)

    study = config.to_study()
    if experiment == ExperimentName.clt:
        return run_clt_study(study)
    if experiment == ExperimentName.moment_scaling:
        return run_moment_scaling(study)
    if experiment == ExperimentName.mdp:
        return run_mdp_study(study)
    if experiment == ExperimentName.boundedness:
        return run_boundedness_study(study)

    h = config.control.build(study.grid)
    if experiment == ExperimentName.controlled:
        return run_controlled_convergence(study, h)
    if experiment == ExperimentName.weak_continuity:
        return run_weak_continuity_probe(study, h)
    if experiment == ExperimentName.girsanov:
        return run_girsanov_probe(study, h)
    raise ConfigurationError(f"unknown experiment '{experiment}'", field="experiment")


def _log_flags(report: Report) -> None:
    if isinstance(report, ScalingReport):
        failed = [name for name, passed in report.flags.items() if not passed]
        if failed:
            spdelab.logging.logger.warning(f"{report.experiment.value}: flags not met: {join_to_series(failed)}")
    elif isinstance(report, KernelReport) and not report.all_passed:
        spdelab.logging.logger.warning("kernel_report: some properties failed")


def run_from_config(
    path: Union[str, pathlib.Path],
    *,
    out: Optional[pathlib.Path] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> int:
    """Execute the experiment in `path` and write its reports.

    Returns 0 on success, 2 when the configuration is invalid and 1 when the
    experiment or the report writer fails.
    """
    try:
        config = load_config(path)
        overrides = {}
        if seed is not None:
            overrides["base_seed"] = seed
        if threads is not None:
            overrides["study"] = config.study.copy(update={"workers": threads})
        if out is not None:
            overrides["out"] = pathlib.Path(out)
        if overrides:
            config = config.copy(update=overrides)
    except ConfigurationError as error:
        spdelab.logging.logger.error(f"invalid configuration: {error}")
        return 2

    log = spdelab.logging.logger.bind(experiment=config.experiment.value)
    log.info(f"running {config.experiment.value} on the {config.preset.value} preset")
    try:
        report = execute(config)
        _log_flags(report)
        emit_report(report, config.out, config.formats, config=config)
    except ConfigurationError as error:
        log.error(f"invalid configuration: {error}")
        return 2
    except NonConvergenceError as error:
        log.error(f"least-norm control did not converge: {error}")
        if error.best is not None:
            try:
                emit_report(error.best, config.out, config.formats, config=config)
            except ReportError as report_error:
                log.error(f"unable to write the best iterate: {report_error}")
        return 1
    except BaseError as error:
        log.error(f"{config.experiment.value} failed: {error}")
        return 1
    return 0
