"""The `spdelab.types` module defines the essential data types shared by all
consumers of the spdelab package.
"""
from __future__ import annotations

import enum
from typing import Any, Callable, Optional

import numpy as np
import orjson
import pydantic

__all__ = (
    "BaseModel",
    "BaseModelConfig",
    "FrozenModel",
    "Evaluator",
    "ErrorSeverity",
    "FluxForm",
    "KernelBoundary",
    "KernelDerivative",
    "KernelMode",
    "PathKind",
    "PresetName",
    "ExperimentName",
    "ReportFormat",
    "SUP",
)


# An evaluator maps (t, x, r) to a value; all three broadcast as numpy arrays
Evaluator = Callable[[Any, Any, Any], Any]

# Marker accepted by `lp_norm` for the max-norm
SUP = "sup"


def _orjson_dumps(
    v: Any, *, default: Callable[[Any], Any], indent: Optional[int] = None, sort_keys: bool = False
) -> str:
    """Serializes an input object into JSON via the `orjson` library.

    numpy arrays and scalars are serialized natively.

    Returns:
        A JSON string representation of the input object.

    Raises:
        TypeError: Raised if the input object could not be serialized to a JSON representation.
    """
    option = orjson.OPT_PASSTHROUGH_SUBCLASS | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS
    if indent and indent == 2:
        option |= orjson.OPT_INDENT_2
    if sort_keys:
        option |= orjson.OPT_SORT_KEYS

    return orjson.dumps(v, default=default, option=option).decode()


DEFAULT_JSON_ENCODERS = {
    np.ndarray: lambda v: v.tolist(),
    np.floating: float,
    np.integer: int,
    Exception: repr,
}


class BaseModelConfig:
    """The `BaseModelConfig` class provides a common set of Pydantic model
    configuration shared across the library.
    """

    json_encoders = DEFAULT_JSON_ENCODERS
    json_loads = orjson.loads
    json_dumps = _orjson_dumps
    validate_assignment = True
    arbitrary_types_allowed = True


class BaseModel(pydantic.BaseModel):
    """The `BaseModel` class is the base class implementation of Pydantic model
    types utilized throughout the library.
    """

    class Config(BaseModelConfig):
        validate_all = True


class FrozenModel(BaseModel):
    """Immutable model base for values shared across worker threads."""

    class Config(BaseModelConfig):
        allow_mutation = False


class ErrorSeverity(str, enum.Enum):
    """ErrorSeverity is an enumeration the describes the severity of an error
    and establishes semantics about how it should be handled."""

    warning = "warning"
    """Warnings are advisory. A failed warning check does not fail a report.
    """

    common = "common"
    """Common errors are atomic failures that have no bearing on the outcome of
    other checks.
    """

    critical = "critical"
    """Critical errors block the execution of dependent checks.

    A check suite halts at the first failed critical check so that a single
    failure identifies the root cause (for example a non-finite kernel value
    makes every quantitative kernel property meaningless).
    """


class FluxForm(str, enum.Enum):
    centered_conservative = "centered_conservative"
    upwind = "upwind"


class KernelBoundary(str, enum.Enum):
    free_space = "free_space"
    dirichlet = "dirichlet"


class KernelDerivative(str, enum.Enum):
    value = "value"
    d_dy = "d_dy"


class KernelMode(str, enum.Enum):
    """Which kernel the convolution operator J integrates against."""

    G = "G"
    dG_dy = "dG_dy"


class PathKind(str, enum.Enum):
    deterministic = "deterministic"
    spde = "spde"
    linearized = "linearized"
    skeleton = "skeleton"
    controlled = "controlled"
    moderate = "moderate"


class PresetName(str, enum.Enum):
    additive = "additive"
    burgers = "burgers"
    reaction_diffusion = "reaction_diffusion"


class ExperimentName(str, enum.Enum):
    clt = "clt"
    moment_scaling = "moment_scaling"
    mdp = "mdp"
    controlled = "controlled"
    weak_continuity = "weak_continuity"
    kernel_report = "kernel_report"
    rate_eval = "rate_eval"
    boundedness = "boundedness"
    girsanov = "girsanov"


class ReportFormat(str, enum.Enum):
    csv = "csv"
    json = "json"
