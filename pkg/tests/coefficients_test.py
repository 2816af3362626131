from typing import Any

import numpy as np
import pytest

from spdelab.coefficients import (
    CoefficientSet,
    compose_coefficients,
    list_presets,
    make_preset,
    one,
    validate_assumptions,
    zero,
)
from spdelab.errors import InvalidArgumentError
from spdelab.types import PresetName


def _identity(t: Any, x: Any, r: Any) -> Any:
    return r + zero(t, x, r)


def _square(t: Any, x: Any, r: Any) -> Any:
    return r * r + zero(t, x, r)


class TestPresets:
    def test_additive(self, additive: CoefficientSet) -> None:
        r = np.linspace(-5, 5, 11)
        assert np.array_equal(additive.sigma(0.3, 0.7, r), np.ones_like(r))
        assert not additive.dg_dr(0.3, 0.7, r).any()
        assert additive.is_additive()

    def test_burgers(self, burgers: CoefficientSet) -> None:
        assert burgers.g(0.0, 0.5, 2.0) == 2.0
        assert burgers.dg_dr(0.0, 0.5, 2.0) == 2.0
        assert np.all(burgers.d2g_dr2(0.0, 0.5, np.linspace(-3, 3, 7)) == 1.0)
        assert burgers.sigma(0.0, 0.5, 1.0) == 0.5
        assert not burgers.is_additive()

    def test_reaction_diffusion(self) -> None:
        coefficients = make_preset(PresetName.reaction_diffusion)
        assert coefficients.b(0.0, 0.5, 1.0) == 0.5
        assert coefficients.db_dr(0.0, 0.5, 1.0) == 0.0
        assert coefficients.sigma(0.0, 0.5, 0.0) == 1.0
        assert not coefficients.g(0.0, 0.5, np.arange(3.0)).any()

    @pytest.mark.parametrize("name", ["burgers", PresetName.burgers])
    def test_accepts_strings_and_enums(self, name) -> None:
        assert make_preset(name).label == "burgers"

    def test_unknown_name(self) -> None:
        with pytest.raises(InvalidArgumentError, match="unknown preset 'foo'"):
            make_preset("foo")

    def test_evaluators_broadcast(self, preset: CoefficientSet) -> None:
        t = np.zeros((2, 1, 1))
        x = np.zeros((1, 3, 1))
        r = np.linspace(-1, 1, 4)
        for name in ("b", "g", "sigma", "db_dr", "dg_dr", "d2g_dr2"):
            assert np.shape(getattr(preset, name)(t, x, r)) == (2, 3, 4)

    def test_list_presets(self) -> None:
        infos = {info.name: info for info in list_presets()}
        assert set(infos) == set(PresetName)
        assert infos[PresetName.additive].lipschitz_L == 0.0
        assert infos[PresetName.burgers].growth_K == 1.0
        assert all(info.description for info in infos.values())

    def test_str(self, burgers: CoefficientSet) -> None:
        assert str(burgers) == "burgers(K=1, L=1)"


class TestCompose:
    def test_replaces_evaluators(self, burgers: CoefficientSet) -> None:
        pure = compose_coefficients(burgers, sigma=one)
        assert pure.label == "burgers*"
        assert pure.sigma(0.0, 0.5, 3.0) == 1.0
        assert pure.g is burgers.g

    def test_explicit_label(self, burgers: CoefficientSet) -> None:
        assert compose_coefficients(burgers, label="pure", sigma=one).label == "pure"

    def test_rejects_unknown_fields(self, burgers: CoefficientSet) -> None:
        with pytest.raises(InvalidArgumentError, match="unknown coefficient fields: f"):
            compose_coefficients(burgers, f=one)

    def test_a_drift_breaks_additivity(self, additive: CoefficientSet) -> None:
        # ∂_r b still vanishes, so only the drift itself rules the set out
        drifted = compose_coefficients(additive, b=one)
        assert not drifted.db_dr(0.0, 0.5, np.linspace(-3, 3, 7)).any()
        assert not drifted.is_additive()
        assert compose_coefficients(additive, b=zero).is_additive()


class TestValidateAssumptions:
    def test_every_preset_passes(self, preset: CoefficientSet) -> None:
        report = validate_assumptions(preset, (-20.0, 20.0), 5)
        assert report.passed, {name: report.witnesses.get(name) for name, ok in report.flags.items() if not ok}

    def test_constants_are_nonnegative(self, preset: CoefficientSet) -> None:
        report = validate_assumptions(preset)
        assert all(value >= 0.0 for value in report.constants.values())
        assert all(value >= 0.0 for value in report.derivative_defects.values())

    def test_unbounded_sigma_is_witnessed(self, additive: CoefficientSet) -> None:
        report = validate_assumptions(compose_coefficients(additive, sigma=_identity), (-10.0, 10.0), 3)
        assert not report.flags["h1_sigma_bounded"]
        assert abs(report.witnesses["h1_sigma_bounded"]["r"]) == 10.0
        assert report.constants["h1_sigma_bounded"] == pytest.approx(10.0)
        assert not report.passed

    def test_wrong_derivative_is_witnessed(self, additive: CoefficientSet) -> None:
        coefficients = compose_coefficients(additive, g=_square, dg_dr=_identity, growth_K=2.0, lipschitz_L=2.0)
        report = validate_assumptions(coefficients, (-10.0, 10.0), 3)
        assert not report.flags["dg_consistency"]
        assert abs(report.witnesses["dg_consistency"]["r"]) == 10.0
        # the centered difference of r² is 2r, so the defect at the witness is |r|
        assert report.derivative_defects["dg_consistency"] == pytest.approx(10.0, rel=1e-6)

    def test_constants_grow_with_the_range(self, preset: CoefficientSet) -> None:
        narrow = validate_assumptions(preset, (-5.0, 5.0))
        wide = validate_assumptions(preset, (-20.0, 20.0))
        for name, value in narrow.constants.items():
            assert value <= wide.constants[name] + 1e-12

    def test_report_metadata(self, burgers: CoefficientSet) -> None:
        report = validate_assumptions(burgers, (-1.0, 1.0), 4)
        assert report.label == "burgers"
        assert report.r_range == (-1.0, 1.0)
        assert report.samples == 4
        assert set(report.flags) == {check.id for check in report.checks}

    def test_nonfinite_evaluator_fails(self, additive: CoefficientSet) -> None:
        coefficients = compose_coefficients(additive, b=lambda t, x, r: np.where(r == 0, np.nan, 0.0) + zero(t, x, r))
        report = validate_assumptions(coefficients, (-1.0, 1.0), 2)
        assert not report.flags["finite"]
        assert report.witnesses["finite"]["r"] == 0.0

    def test_requires_two_samples(self, additive: CoefficientSet) -> None:
        with pytest.raises(InvalidArgumentError):
            validate_assumptions(additive, samples=1)

    def test_rejects_inverted_range(self, additive: CoefficientSet) -> None:
        with pytest.raises(InvalidArgumentError, match="invalid r range"):
            validate_assumptions(additive, (1.0, -1.0))
