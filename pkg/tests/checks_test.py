import hashlib
from typing import List, Optional, Tuple

import pytest

from spdelab.checks import BaseChecks, Check, CheckError, ErrorSeverity, Outcome, check, require, warn


def test_generate_check_id() -> None:
    check_ = Check(name="Mass conservation")
    assert check_.id == hashlib.blake2b(b"Mass conservation", digest_size=4).hexdigest()


def test_decorator_sets_id_to_function_name() -> None:
    @check("Symmetry")
    def check_symmetry() -> bool:
        return True

    assert check_symmetry.__check__.id == "check_symmetry"
    assert check_symmetry().id == "check_symmetry"


def test_decorator_explicit_id() -> None:
    @check("Symmetry", id="sym")
    def check_symmetry() -> bool:
        return True

    assert check_symmetry().id == "sym"


def test_inline_check() -> None:
    check_ = Check.run("Inline", handler=lambda: True)
    assert check_.name == "Inline"
    assert check_.success
    assert check_.passed


def test_inline_check_failure() -> None:
    def failing_check() -> None:
        raise RuntimeError("Testing Failure")

    check_ = Check.run("Inline Failure", handler=failing_check)
    assert not check_.success
    assert check_.failed
    assert check_.message == "caught exception (RuntimeError): Testing Failure"
    assert isinstance(check_.exception, RuntimeError)


def test_check_error_carries_hint() -> None:
    def failing_check() -> None:
        raise CheckError("mass exceeds one", hint="refine the quadrature")

    check_ = Check.run("Hinted", handler=failing_check)
    assert check_.message == "mass exceeds one"
    assert check_.hint == "refine the quadrature"


def test_assertion_message_is_recorded() -> None:
    def failing_check() -> None:
        assert False, "semigroup defect too large"

    check_ = Check.run("Assertion", handler=failing_check)
    assert not check_.success
    assert check_.message.startswith("semigroup defect too large")


@pytest.mark.parametrize(
    ("return_value", "success", "message"),
    [
        (True, True, None),
        (False, False, None),
        ("a message", True, "a message"),
        ((True, "fine"), True, "fine"),
        ((False, "broken"), False, "broken"),
        (None, True, None),
    ],
)
def test_valid_check_decorator_return_values(return_value, success: bool, message: Optional[str]) -> None:
    @check("Test")
    def check_test() -> object:
        return return_value

    result = check_test()
    assert isinstance(result, Check)
    assert result.success == success
    assert result.message == message


def test_outcome_records_value_and_witness() -> None:
    @check("Defect")
    def check_defect() -> Outcome:
        return Outcome(success=False, value=0.25, witness={"t": 0.1, "x": 0.5}, message="too large")

    result = check_defect()
    assert not result.success
    assert result.value == 0.25
    assert result.witness == {"t": 0.1, "x": 0.5}
    assert result.message == "too large"


def test_invalid_return_type_fails_the_check() -> None:
    @check("Test")
    def check_test() -> object:
        return 123

    result = check_test()
    assert not result.success
    assert "unexpected value of type" in result.message


def test_decorating_a_non_function_raises() -> None:
    with pytest.raises(TypeError, match="expected a synchronous function"):
        check("Test")(object())


def test_each_run_returns_a_fresh_check() -> None:
    calls: List[int] = []

    @check("Counter")
    def check_counter() -> bool:
        calls.append(1)
        return len(calls) == 1

    first, second = check_counter(), check_counter()
    assert first.success
    assert not second.success
    assert first is not second


def test_warnings_pass_even_when_unsuccessful() -> None:
    @warn("Convention")
    def check_convention() -> bool:
        return False

    result = check_convention()
    assert result.warning
    assert not result.success
    assert result.passed
    assert not result.failed


def test_require_is_critical() -> None:
    @require("Finite")
    def check_finite() -> bool:
        return False

    assert check_finite().critical


class SampleChecks(BaseChecks):
    outcomes: Tuple[bool, bool, bool, bool] = (True, True, True, True)

    @check("first")
    def check_first(self) -> bool:
        return self.outcomes[0]

    @require("second")
    def check_second(self) -> bool:
        return self.outcomes[1]

    @warn("third")
    def check_third(self) -> bool:
        return self.outcomes[2]

    @check("fourth")
    def check_fourth(self) -> bool:
        return self.outcomes[3]

    def helper(self) -> int:
        return 1


class TestBaseChecks:
    def test_runs_in_definition_order(self) -> None:
        checks = SampleChecks().run_all()
        assert [c.id for c in checks] == ["check_first", "check_second", "check_third", "check_fourth"]
        assert all(c.success for c in checks)

    def test_critical_failure_halts(self) -> None:
        checks = SampleChecks(outcomes=(True, False, True, True)).run_all()
        assert [c.id for c in checks] == ["check_first", "check_second"]

    @pytest.mark.parametrize(
        ("halt_on", "expected"),
        [
            (None, ["check_first", "check_second", "check_third", "check_fourth"]),
            (ErrorSeverity.critical, ["check_first", "check_second", "check_third", "check_fourth"]),
            (ErrorSeverity.common, ["check_first"]),
            (ErrorSeverity.warning, ["check_first"]),
        ],
    )
    def test_halt_on_common_failure(self, halt_on: Optional[ErrorSeverity], expected: List[str]) -> None:
        checks = SampleChecks(outcomes=(False, True, True, True)).run_all(halt_on=halt_on)
        assert [c.id for c in checks] == expected

    def test_failed_warning_halts_only_on_warning(self) -> None:
        outcomes = (True, True, False, True)
        assert len(SampleChecks(outcomes=outcomes).run_all(halt_on=ErrorSeverity.common)) == 4
        assert len(SampleChecks(outcomes=outcomes).run_all(halt_on=ErrorSeverity.warning)) == 3

    def test_undecorated_check_method_raises(self) -> None:
        class InvalidChecks(BaseChecks):
            def check_plain(self) -> bool:
                return True

        with pytest.raises(ValueError, match='invalid check method "check_plain"'):
            InvalidChecks().run_all()

    def test_subclass_checks_run_first(self) -> None:
        class ExtendedChecks(SampleChecks):
            @check("extra")
            def check_extra(self) -> bool:
                return True

        checks = ExtendedChecks().run_all()
        assert [c.id for c in checks][0] == "check_extra"
        assert len(checks) == 5
