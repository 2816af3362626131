from __future__ import annotations

import json
import pathlib
import re
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import pydantic
import yaml

import spdelab.logging
import spdelab.types
from spdelab.errors import ConfigurationError
from spdelab.experiments import StudyConfig, check_epsilon_grid, check_lambda_exponent, default_control
from spdelab.kernels import HeatKernel
from spdelab.lattice import Profile, SpaceTimeGrid, make_grid
from spdelab.noise import Control
from spdelab.types import ExperimentName, FluxForm, KernelBoundary, PresetName, ReportFormat

__all__ = [
    "AbstractBaseConfiguration",
    "ControlSettings",
    "GridSettings",
    "KernelSettings",
    "RateSettings",
    "RunConfig",
    "StudySettings",
    "load_config",
]

ENV_PREFIX = "SPDELAB_"

DEFAULT_TITLE = "Base Configuration Schema"

# Experiments that draw replicas and therefore need an ε grid
MONTE_CARLO_EXPERIMENTS = frozenset(
    {
        ExperimentName.clt,
        ExperimentName.moment_scaling,
        ExperimentName.mdp,
        ExperimentName.controlled,
        ExperimentName.boundedness,
        ExperimentName.girsanov,
    }
)


class AbstractBaseConfiguration(pydantic.BaseSettings, spdelab.logging.Mixin):
    """
    AbstractBaseConfiguration is the root of the spdelab configuration class hierarchy.
    It declares no fields of its own but provides file parsing, YAML serialization
    and environment variable naming shared by every settings class.

    Environment variables are named after the class: `GridSettings.nx` reads
    `SPDELAB_GRID_NX`, while `RunConfig` fields read `SPDELAB_<FIELD>` directly.
    """

    @classmethod
    def parse_file(
        cls, file: pathlib.Path, *, key: Optional[str] = None
    ) -> "AbstractBaseConfiguration":
        """
        Parse a JSON or YAML configuration file and return the configuration it holds.

        If the file does not contain a valid configuration, a `ValidationError` will be raised.
        """
        file = pathlib.Path(file)
        text = file.read_text()
        if file.suffix.lower() == ".json":
            config = json.loads(text)
        else:
            config = yaml.load(text, Loader=yaml.FullLoader)

        if key:
            try:
                config = config[key]
            except KeyError as error:
                raise KeyError(f"invalid key '{key}'") from error
        return cls.parse_obj(config)

    @classmethod
    def generate(cls, **kwargs) -> "AbstractBaseConfiguration":
        """
        Return a set of default settings for a new configuration.
        """
        return cls(**kwargs)

    # Automatically uppercase env names upon subclassing
    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)

        base_name = re.sub(r"(Settings|Config|Configuration)$", "", cls.__name__)
        if cls.__config__.title == DEFAULT_TITLE:
            cls.__config__.title = f"{base_name} Configuration Schema"

        prefix = cls.__config__.env_prefix
        if prefix == "":
            prefix = ENV_PREFIX + re.sub(r"(?<!^)(?=[A-Z])", "_", base_name).upper() + "_"

        for name, field in cls.__fields__.items():
            field.field_info.extra["env_names"] = {f"{prefix}{name}".upper()}

    def yaml(
        self,
        *,
        include: Union[pydantic.AbstractSetIntStr, pydantic.MappingIntStrAny] = None,
        exclude: Union[pydantic.AbstractSetIntStr, pydantic.MappingIntStrAny] = None,
        by_alias: bool = False,
        exclude_unset: bool = False,
        exclude_defaults: bool = False,
        exclude_none: bool = False,
        encoder: Optional[Callable[[Any], Any]] = None,
        **dumps_kwargs: Any,
    ) -> str:
        """
        Generate a YAML representation of the configuration.

        Arguments are passed through to the Pydantic `BaseModel.json` method.
        """
        # NOTE: We have to serialize through JSON first (enums and arrays do not serialize directly to YAML)
        config_json = self.json(
            include=include,
            exclude=exclude,
            by_alias=by_alias,
            exclude_unset=exclude_unset,
            exclude_defaults=exclude_defaults,
            exclude_none=exclude_none,
            encoder=encoder,
            **dumps_kwargs,
        )
        return yaml.dump(json.loads(config_json), sort_keys=False)

    class Config(spdelab.types.BaseModelConfig):
        env_file = ".env"
        case_sensitive = True
        extra = pydantic.Extra.forbid
        title = DEFAULT_TITLE
        allow_population_by_field_name = True


class GridSettings(AbstractBaseConfiguration):
    """The space-time lattice: `nx` interior nodes, `nt` steps over [0, T]."""

    nx: pydantic.PositiveInt = 63
    nt: pydantic.PositiveInt = 4096
    horizon_T: pydantic.PositiveFloat = pydantic.Field(0.1, alias="T")

    def build(self) -> SpaceTimeGrid:
        return make_grid(self.nx, self.nt, self.horizon_T)


class ControlSettings(AbstractBaseConfiguration):
    """The deterministic control h for the controlled, weak-continuity and Girsanov experiments."""

    norm_squared: pydantic.PositiveFloat = 1.0
    """∫∫h² of the control."""

    mode: pydantic.PositiveInt = 1
    bound_M: Optional[pydantic.PositiveFloat] = None

    @pydantic.root_validator(skip_on_failure=True)
    @classmethod
    def _check_ball(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        bound = values.get("bound_M")
        if bound is not None and values["norm_squared"] > bound:
            raise ValueError(f"norm_squared {values['norm_squared']:g} exceeds bound_M {bound:g}")
        return values

    def build(self, grid: SpaceTimeGrid) -> Control:
        h = default_control(grid, self.norm_squared, self.mode)
        return Control(grid=grid, values=h.values, bound_M=self.bound_M)


class KernelSettings(AbstractBaseConfiguration):
    boundary: KernelBoundary = KernelBoundary.dirichlet
    truncation: pydantic.PositiveInt = 64
    t_samples: List[pydantic.PositiveFloat] = [1e-3, 1e-2, 1e-1]
    x_samples: List[pydantic.confloat(ge=0.0, le=1.0)] = [0.1, 0.25, 0.5, 0.75, 0.9]

    @pydantic.validator("t_samples", "x_samples")
    @classmethod
    def _nonempty(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one sample is required")
        return v

    def build(self) -> HeatKernel:
        return HeatKernel(boundary=self.boundary, truncation=self.truncation)


class RateSettings(AbstractBaseConfiguration):
    """The target profile Σ a_k sin(kπx) and the conjugate-residual tolerances."""

    target_modes: Dict[pydantic.PositiveInt, float] = {1: 0.1}
    tol: pydantic.PositiveFloat = 1e-10
    max_iter: pydantic.PositiveInt = 200
    oracle_modes: Optional[pydantic.PositiveInt] = None

    def build(self, grid: SpaceTimeGrid) -> Profile:
        values = np.zeros(grid.nx)
        for k, amplitude in sorted(self.target_modes.items()):
            values = values + amplitude * np.sin(k * np.pi * grid.x)
        return Profile(grid=grid, values=values)


class StudySettings(AbstractBaseConfiguration):
    """Execution and discretization parameters of the Monte Carlo studies."""

    block_size: pydantic.PositiveInt = 32
    workers: pydantic.PositiveInt = 1
    noise_chunk: pydantic.PositiveInt = 64
    theta: pydantic.confloat(ge=0.0, le=1.0) = 1.0
    flux_form: FluxForm = FluxForm.centered_conservative
    stop_radius_R: Optional[pydantic.PositiveFloat] = None
    initial_amplitude: float = 1.0
    initial_mode: pydantic.PositiveInt = 1
    quantile: pydantic.confloat(gt=0.0, lt=1.0) = 0.95
    n_max: pydantic.PositiveInt = 16
    decay_threshold: pydantic.PositiveFloat = 0.10
    max_divergence_fraction: pydantic.confloat(ge=0.0, le=1.0) = 0.01


class RunConfig(AbstractBaseConfiguration):
    """
    The configuration of one `spdelab run`: which experiment to execute, on which
    preset and grid, and where to write the reports.
    """

    experiment: ExperimentName
    preset: PresetName = PresetName.burgers
    grid: GridSettings = pydantic.Field(default_factory=GridSettings)
    epsilon_grid: Optional[List[pydantic.PositiveFloat]] = None
    lambda_exponent_a: float = 0.2
    replicas: pydantic.PositiveInt = 200
    delta: pydantic.PositiveFloat = 0.05
    p: pydantic.confloat(ge=2.0) = 2.0
    r: pydantic.NonNegativeFloat = 0.1
    base_seed: pydantic.conint(ge=0, lt=2 ** 64) = 0

    control: ControlSettings = pydantic.Field(default_factory=ControlSettings)
    kernel: KernelSettings = pydantic.Field(default_factory=KernelSettings)
    rate: RateSettings = pydantic.Field(default_factory=RateSettings)
    study: StudySettings = pydantic.Field(default_factory=StudySettings)

    out: pathlib.Path = pathlib.Path("reports")
    """Directory the reports are written into."""

    formats: List[ReportFormat] = [ReportFormat.csv, ReportFormat.json]

    @pydantic.validator("epsilon_grid", always=True)
    @classmethod
    def _require_epsilon_grid(cls, v: Optional[List[float]], values: Dict[str, Any]) -> Optional[List[float]]:
        if v is None:
            if values.get("experiment") in MONTE_CARLO_EXPERIMENTS:
                raise ValueError(f"field required for the {values['experiment'].value} experiment")
            return v
        return check_epsilon_grid(v)

    _validate_lambda_exponent = pydantic.validator("lambda_exponent_a", allow_reuse=True)(check_lambda_exponent)

    @pydantic.validator("formats")
    @classmethod
    def _validate_formats(cls, v: List[ReportFormat]) -> List[ReportFormat]:
        if not v:
            raise ValueError("at least one report format is required")
        return list(dict.fromkeys(v))

    def to_study(self) -> StudyConfig:
        """The `StudyConfig` the experiments module consumes."""
        settings = self.study.dict()
        if self.epsilon_grid is not None:
            settings["epsilon_grid"] = self.epsilon_grid
        return StudyConfig(
            preset=self.preset,
            nx=self.grid.nx,
            nt=self.grid.nt,
            horizon_T=self.grid.horizon_T,
            lambda_exponent_a=self.lambda_exponent_a,
            replicas=self.replicas,
            delta_threshold=self.delta,
            moment_p=self.p,
            radius_r=self.r,
            base_seed=self.base_seed,
            **settings,
        )

    class Config(AbstractBaseConfiguration.Config):
        env_prefix = ENV_PREFIX
        title = "Run Configuration Schema"


def _field_name(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error["loc"] if part != "__root__") or "__root__"


def load_config(path: Union[str, pathlib.Path]) -> RunConfig:
    """Read a run configuration, converting every failure into a `ConfigurationError`.

    The error names the first offending field (dotted for nested settings).
    """
    path = pathlib.Path(path)
    try:
        return RunConfig.parse_file(path)
    except pydantic.ValidationError as error:
        first = error.errors()[0]
        field = _field_name(first)
        raise ConfigurationError(f"invalid configuration in {path}: {field}: {first['msg']}", field=field) from error
    except (OSError, ValueError, yaml.YAMLError) as error:
        raise ConfigurationError(f"unable to read configuration from {path}: {error}") from error
