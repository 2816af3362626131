import builtins
import pathlib
from typing import Iterator, List

import devtools
import numpy as np
import pytest
import typer.testing

import spdelab
import spdelab.cli
from spdelab.coefficients import CoefficientSet, make_preset
from spdelab.lattice import Profile, SpaceTimeGrid, make_grid
from spdelab.logging import logger, reset_to_defaults
from spdelab.solver import PathResult, solve_deterministic
from spdelab.types import PresetName

# Add the devtools debug() function globally in tests
builtins.debug = devtools.debug


def pytest_addoption(parser) -> None:
    parser.addoption(
        "--slow",
        action="store_true",
        default=False,
        help="run the desk-scale acceptance tests marked `slow`",
    )


def pytest_collection_modifyitems(config, items: List[pytest.Item]) -> None:
    if config.getoption("--slow"):
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run: pass --slow to include")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def cli_runner() -> typer.testing.CliRunner:
    return typer.testing.CliRunner(mix_stderr=False)


@pytest.fixture()
def lab_cli() -> spdelab.cli.LabCLI:
    return spdelab.cli.LabCLI()


@pytest.fixture()
def captured_logs() -> Iterator[List[str]]:
    """Collect formatted log messages at every level for the duration of a test."""
    messages: List[str] = []
    handler_id = logger.add(lambda m: messages.append(m.record["message"]), level=0)
    yield messages
    logger.remove(handler_id)
    reset_to_defaults()


@pytest.fixture()
def small_grid() -> SpaceTimeGrid:
    """A coarse grid for unit tests: 15 interior nodes, 200 steps over T = 0.1."""
    return make_grid(15, 200, 0.1)


@pytest.fixture()
def sine_profile(small_grid: SpaceTimeGrid) -> Profile:
    return Profile.from_function(small_grid, lambda x: np.sin(np.pi * x))


@pytest.fixture(params=list(PresetName), ids=lambda name: name.value)
def preset(request) -> CoefficientSet:
    return make_preset(request.param)


@pytest.fixture()
def additive() -> CoefficientSet:
    return make_preset(PresetName.additive)


@pytest.fixture()
def burgers() -> CoefficientSet:
    return make_preset(PresetName.burgers)


@pytest.fixture()
def burgers_path(small_grid: SpaceTimeGrid, sine_profile: Profile, burgers: CoefficientSet) -> PathResult:
    return solve_deterministic(sine_profile, burgers, small_grid)


@pytest.fixture()
def report_dir(tmp_path: pathlib.Path) -> pathlib.Path:
    return tmp_path / "reports"
