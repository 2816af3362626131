"""Property checks: atomic numerical verifications with a recorded outcome.

Kernel properties, coefficient assumptions and configuration validation are
all expressed as suites of checks. A check handler returns a `bool`, a `str`,
a `(bool, str)` tuple, an `Outcome` (which also carries the measured value and
a witness point) or `None`; exceptions raised by the handler fail the check.
"""
import functools
import hashlib
import inspect
from typing import Any, Callable, Dict, Generator, List, Optional, Tuple, TypeVar, Union, cast

import pydantic

import spdelab.logging
from spdelab.types import BaseModel, ErrorSeverity

__all__ = [
    "BaseChecks",
    "Check",
    "CheckError",
    "CheckHandler",
    "CheckHandlerResult",
    "ErrorSeverity",
    "Outcome",
    "check",
    "require",
    "run_check_handler",
    "warn",
]


class Outcome(BaseModel):
    """The measured result of a quantitative check."""

    success: bool
    message: Optional[str] = None
    value: Optional[float] = None
    witness: Optional[Dict[str, float]] = None


CheckHandlerResult = Union[bool, str, Tuple[bool, str], Outcome, None]
CheckHandler = TypeVar("CheckHandler", bound=Callable[..., CheckHandlerResult])
CheckRunner = Callable[..., "Check"]


class CheckError(RuntimeError):
    def __init__(self, message: str, *, hint: Optional[str] = None) -> None:
        super().__init__(message)
        self.hint = hint


class Check(pydantic.BaseModel, spdelab.logging.Mixin):
    """
    Check objects represent the outcome of a single property verification.

    A check tests one numerical property (a kernel identity, a growth bound,
    a configuration invariant) and records whether it held, the measured
    value and, on failure, the sample point that witnessed the violation.
    """

    name: pydantic.StrictStr
    """An arbitrary descriptive name of the property being checked.
    """

    id: pydantic.StrictStr = None
    """A short identifier for the check. Generated automatically if unset.
    """

    description: Optional[pydantic.StrictStr]

    severity: ErrorSeverity = ErrorSeverity.common
    """The relative importance of the check determining failure handling.
    """

    success: Optional[bool]
    message: Optional[pydantic.StrictStr]
    hint: Optional[pydantic.StrictStr] = None

    value: Optional[float] = None
    """The measured quantity (defect, constant, ratio) when the check is quantitative.
    """

    witness: Optional[Dict[str, float]] = None
    """The sample point at which the measured quantity was worst.
    """

    exception: Optional[Exception]

    @classmethod
    def run(
        cls,
        name: str,
        *,
        handler: CheckHandler,
        description: Optional[str] = None,
        args: List[Any] = [],
        kwargs: Dict[Any, Any] = {},
    ) -> "Check":
        """Run a check handler and return a Check object reporting the outcome."""
        check = Check(name=name, description=description)
        run_check_handler(check, handler, *args, **kwargs)
        return check

    @property
    def passed(self) -> bool:
        """Return a boolean value that Indicates if the check passed.

        Checks can pass by evaluating positively or being a warning.
        """
        return bool(self.success or self.warning)

    @property
    def failed(self) -> bool:
        return not self.success and not self.warning

    @property
    def critical(self) -> bool:
        return self.severity == ErrorSeverity.critical

    @property
    def warning(self) -> bool:
        return self.severity == ErrorSeverity.warning

    @pydantic.validator("id", pre=True, always=True)
    @classmethod
    def _generated_id(cls, v: Optional[str], values: Dict[str, Any]) -> str:
        return (
            v
            or hashlib.blake2b(
                values["name"].encode("utf-8"), digest_size=4
            ).hexdigest()
        )

    def __hash__(self) -> int:
        return hash((self.id,))

    class Config:
        validate_assignment = True
        arbitrary_types_allowed = True
        json_encoders = {
            Exception: lambda v: repr(v),
        }


def check(
    name: str,
    *,
    description: Optional[str] = None,
    id: Optional[str] = None,
    severity: ErrorSeverity = ErrorSeverity.common,
) -> Callable[[CheckHandler], CheckRunner]:
    """
    Transform a function or method into a check.

    The decorated function computes the property and returns a `bool`, `str`,
    `Tuple[bool, str]`, `Outcome` or `None`. The decorator wraps it into a
    function of the same parameters that returns a `Check`.

    Args:
        name: Human readable name of the check.
        description: Optional additional details about the check.
        id: A short identifier for referencing the check. Defaults to the function name.
        severity: The severity level of failure.

    Returns:
        A decorator function for transforming a function into a check.

    Raises:
        TypeError: Raised if the decorated object is not a plain function.
    """

    def decorator(fn: CheckHandler) -> CheckRunner:
        if not inspect.isfunction(fn) or inspect.iscoroutinefunction(fn):
            raise TypeError(f"invalid check handler {fn!r}: expected a synchronous function")

        __check__ = Check(
            name=name,
            description=description,
            id=(id or fn.__name__),
            severity=severity,
        )

        @functools.wraps(fn)
        def run_check(*args: Any, **kwargs: Any) -> Check:
            check = __check__.copy()
            run_check_handler(check, fn, *args, **kwargs)
            return check

        run_check.__check__ = __check__  # type: ignore[attr-defined]
        run_check.__annotations__["return"] = Check
        return cast(CheckRunner, run_check)

    return decorator


def require(
    name: str,
    *,
    description: Optional[str] = None,
    id: Optional[str] = None,
) -> Callable[[CheckHandler], CheckRunner]:
    """Transform a function or method into a critical check."""
    return check(name, description=description, id=id, severity=ErrorSeverity.critical)


def warn(
    name: str,
    *,
    description: Optional[str] = None,
    id: Optional[str] = None,
) -> Callable[[CheckHandler], CheckRunner]:
    """Transform a function or method into a warning check."""
    return check(name, description=description, id=id, severity=ErrorSeverity.warning)


class BaseChecks(pydantic.BaseModel, spdelab.logging.Mixin):
    """
    Base class for suites of Check objects.

    Checks are implemented as instance methods prefixed with `check_` and
    decorated with `check`, `require` or `warn`. They run in method definition
    order. A failed check whose severity reaches `halt_on` stops the run.
    """

    def run_all(
        self,
        *,
        halt_on: Optional[ErrorSeverity] = ErrorSeverity.critical,
    ) -> List[Check]:
        """Run all checks and return the results.

        Args:
            halt_on: The severity of check failure that should halt the run.

        Returns:
            A list of checks reflecting the outcome of the checks executed.
        """
        checks: List[Check] = []
        for name, method in self._check_methods():
            check_ = method()
            if not isinstance(check_, Check):
                raise TypeError(f'check method "{name}" returned {check_!r}: expected a Check')
            checks.append(check_)

            if not check_.success:
                self.logger.debug(f"check '{check_.name}' failed: {check_.message}")
                if halt_on and (
                    halt_on == ErrorSeverity.warning
                    or (halt_on == ErrorSeverity.common and not check_.warning)
                    or (halt_on == ErrorSeverity.critical and check_.critical)
                ):
                    break

        return checks

    def _check_methods(self) -> Generator[Tuple[str, CheckRunner], None, None]:
        """Yield check methods in method definition order, walking subclasses before BaseChecks."""
        seen = set()
        for cls in type(self).__mro__:
            if cls is BaseChecks:
                break
            for name, member in vars(cls).items():
                if name in seen or not name.startswith("check_"):
                    continue
                if not hasattr(member, "__check__"):
                    raise ValueError(f'invalid check method "{name}": decorate it with @check, @require or @warn')
                seen.add(name)
                yield name, getattr(self, name)

    class Config:
        arbitrary_types_allowed = True


def run_check_handler(
    check: Check, handler: CheckHandler, *args: Any, **kwargs: Any
) -> None:
    """Run a check handler and record the result into a Check object.

    Raises:
        ValueError: Raised if an invalid value is returned by the handler.
    """
    try:
        _set_check_result(check, handler(*args, **kwargs))
    except Exception as error:
        _set_check_result(check, error)


def _set_check_result(
    check: Check, result: Union[None, bool, str, Tuple[bool, str], Outcome, Exception]
) -> None:
    """Sets the result of a check handler run on a check instance."""
    check.success = True

    if isinstance(result, str):
        check.message = result
    elif isinstance(result, bool):
        check.success = result
    elif isinstance(result, tuple):
        check.success, check.message = result
    elif isinstance(result, Outcome):
        check.success = result.success
        check.message = result.message
        check.value = result.value
        check.witness = result.witness
    elif result is None:
        pass
    elif isinstance(result, Exception):
        check.success = False
        check.exception = result

        if isinstance(result, CheckError):
            check.message = str(result)
            check.hint = result.hint
        elif isinstance(result, AssertionError):
            check.message = str(result)
        else:
            check.message = f"caught exception ({result.__class__.__name__}): {str(result) or repr(result)}"
    else:
        raise ValueError(
            f'check method returned unexpected value of type "{result.__class__.__name__}"'
        )
