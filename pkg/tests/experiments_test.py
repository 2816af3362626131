import math

import numpy as np
import pydantic
import pytest

from spdelab.errors import DivergenceError, InvalidArgumentError
from spdelab.experiments import (
    ScalingReport,
    StudyConfig,
    default_control,
    fit_slope,
    run_boundedness_study,
    run_clt_study,
    run_controlled_convergence,
    run_girsanov_probe,
    run_mdp_study,
    run_moment_scaling,
    run_weak_continuity_probe,
)
from spdelab.lattice import make_grid
from spdelab.solver import energy_bound
from spdelab.types import ExperimentName, PresetName


def _config(**overrides) -> StudyConfig:
    settings = dict(nx=15, nt=100, horizon_T=0.1, replicas=24, block_size=8)
    settings.update(overrides)
    return StudyConfig(**settings)


class TestStudyConfig:
    def test_defaults(self) -> None:
        cfg = StudyConfig()
        assert cfg.epsilon_grid == [1e-2, 1e-3, 1e-4]
        assert cfg.preset == PresetName.burgers
        assert cfg.grid == make_grid(63, 4096, 0.1)

    @pytest.mark.parametrize("grid", [[], [1e-3, 1e-2], [1e-2, 1e-2]])
    def test_rejects_bad_epsilon_grids(self, grid) -> None:
        with pytest.raises(pydantic.ValidationError, match="epsilon_grid"):
            StudyConfig(epsilon_grid=grid)

    @pytest.mark.parametrize("a", [0.0, 0.5, -0.1, 1.0])
    def test_rejects_lambda_exponents_outside_the_window(self, a: float) -> None:
        with pytest.raises(pydantic.ValidationError, match="lambda_exponent_a"):
            StudyConfig(lambda_exponent_a=a)

    def test_scheme_for(self) -> None:
        cfg = StudyConfig(lambda_exponent_a=0.25)
        scheme = cfg.scheme_for(1e-4)
        assert scheme.lambda_ == pytest.approx(10.0)
        assert scheme.kappa == pytest.approx(0.1)
        assert cfg.scheme_for().epsilon == 0.0

    def test_initial_profile(self) -> None:
        cfg = _config(initial_amplitude=2.0, initial_mode=3)
        assert cfg.initial_profile.values == pytest.approx(2.0 * np.sin(3 * np.pi * cfg.grid.x))


class TestFitSlope:
    def test_power_law(self) -> None:
        x = [1e-2, 1e-3, 1e-4]
        fit = fit_slope(x, [3.0 * value ** 0.5 for value in x])
        assert fit.slope == pytest.approx(0.5)
        assert fit.intercept == pytest.approx(math.log(3.0))
        assert fit.r_squared == pytest.approx(1.0)

    def test_needs_two_positive_points(self) -> None:
        assert fit_slope([1.0], [1.0]) is None
        assert fit_slope([1.0, 2.0], [0.0, 1.0]) is None
        assert fit_slope([1.0, 2.0, 4.0], [1.0, float("nan"), 4.0]).slope == pytest.approx(1.0)

    def test_two_points_have_no_stderr(self) -> None:
        assert fit_slope([1.0, 2.0], [1.0, 2.0]).stderr == 0.0


class TestCltStudy:
    def test_report_shape(self) -> None:
        cfg = _config()
        report = run_clt_study(cfg)
        assert isinstance(report, ScalingReport)
        assert report.experiment == ExperimentName.clt
        assert [row.epsilon for row in report.rows] == cfg.epsilon_grid
        for row in report.rows:
            assert 0.0 <= row.estimate <= 1.0
            assert row.n_effective == cfg.replicas
            assert row.diverged == 0
            assert row.lambda_ == pytest.approx(cfg.lambda_for(row.epsilon))
            assert row.extra["mean_terminal_norm"] >= 0.0
        assert report.fit is not None

    def test_independent_of_worker_count(self) -> None:
        assert run_clt_study(_config(workers=1)) == run_clt_study(_config(workers=3))

    def test_reproducible(self) -> None:
        assert run_clt_study(_config(base_seed=5)) == run_clt_study(_config(base_seed=5))
        assert run_clt_study(_config(base_seed=5)) != run_clt_study(_config(base_seed=6))

    def test_additive_linearization_is_exact(self) -> None:
        report = run_clt_study(_config(preset=PresetName.additive))
        assert report.flags["exact_linearization"]
        assert all(row.estimate == 0.0 for row in report.rows)

    def test_diverging_runs_raise(self) -> None:
        with np.errstate(all="ignore"):
            with pytest.raises(DivergenceError):
                run_clt_study(_config(initial_amplitude=1e6, replicas=4))

    @pytest.mark.slow
    def test_fluctuation_slope(self) -> None:
        cfg = _config(nx=63, nt=4096, replicas=200, block_size=50, workers=4)
        assert cfg.epsilon_grid == [1e-2, 1e-3, 1e-4]
        report = run_clt_study(cfg)
        assert report.flags["probability_nonincreasing"], [row.estimate for row in report.rows]
        assert report.flags["slope_in_window"], report.fit
        assert 0.35 <= report.fit.slope <= 0.65


class TestMomentScaling:
    def test_additive_moments_scale_exactly(self) -> None:
        report = run_moment_scaling(_config(preset=PresetName.additive))
        # the difference is √ε·Y on common noise
        scaled = [row.extra["scaled"] for row in report.rows]
        assert scaled == pytest.approx([scaled[0]] * len(scaled), rel=1e-9)
        assert report.fit.slope == pytest.approx(1.0, abs=1e-9)
        assert report.passed
        assert report.summary["expected_slope"] == 1.0

    def test_higher_moments(self) -> None:
        report = run_moment_scaling(_config(preset=PresetName.additive, moment_p=4.0))
        assert report.fit.slope == pytest.approx(2.0, abs=1e-9)
        assert report.summary["C1_hat"] > 0.0

    @pytest.mark.slow
    @pytest.mark.parametrize(
        ("name", "p", "low", "high"),
        [(PresetName.additive, 2.0, 0.9, 1.1), (PresetName.burgers, 4.0, 1.4, 2.6)],
    )
    def test_slope_on_the_desk_grid(self, name: PresetName, p: float, low: float, high: float) -> None:
        cfg = _config(preset=name, moment_p=p, nx=63, nt=4096, replicas=200, block_size=50, workers=4)
        report = run_moment_scaling(cfg)
        assert low <= report.fit.slope <= high, report.fit
        assert report.flags["slope_matches"]

    def test_standard_errors_shrink_with_the_square_root_of_replicas(self) -> None:
        # replicas are keyed streams, so the larger study extends the smaller one
        small = run_moment_scaling(_config(preset=PresetName.additive, replicas=400, block_size=200))
        large = run_moment_scaling(_config(preset=PresetName.additive, replicas=1600, block_size=200))
        for a, b in zip(small.rows, large.rows):
            assert a.n_effective == 400
            assert b.n_effective == 1600
            assert 1.6 <= a.std_error / b.std_error <= 2.5

    def test_stopping_at_a_large_radius(self) -> None:
        free = run_moment_scaling(_config())
        stopped = run_moment_scaling(_config(stop_radius_R=1e6))
        for a, b in zip(free.rows, stopped.rows):
            assert b.estimate >= a.estimate * (1 - 1e-12)
            assert b.extra["mean_exit_time"] == pytest.approx(0.1)
            assert 0.0 <= b.extra["peak_time"] <= 0.1

    def test_stopping_at_the_start(self) -> None:
        # ‖f‖_H = 1/√2 already exceeds the radius
        report = run_moment_scaling(_config(stop_radius_R=0.1))
        for row in report.rows:
            assert row.estimate == 0.0
            assert row.extra["mean_exit_time"] == 0.0
        assert report.fit is None
        assert "slope_matches" not in report.flags


class TestMdpStudy:
    def test_zero_radius_is_certain(self) -> None:
        report = run_mdp_study(_config(radius_r=0.0))
        for row in report.rows:
            assert row.estimate == 1.0
            assert row.extra["rate_estimate"] == 0.0

    def test_beyond_reach(self) -> None:
        report = run_mdp_study(_config(preset=PresetName.additive, radius_r=100.0))
        for row in report.rows:
            assert row.estimate == 0.0
            assert row.extra["beyond_reach"] == 1.0
            assert math.isnan(row.extra["rate_estimate"])
        assert "oracle_match" not in report.flags
        assert report.summary["oracle_rate"] > 0.0

    def test_non_additive_presets_are_estimate_only(self) -> None:
        report = run_mdp_study(_config(radius_r=0.05))
        assert "oracle_rate" not in report.summary
        assert report.flags == {}

    @pytest.mark.slow
    def test_matches_the_gaussian_rate(self) -> None:
        cfg = _config(preset=PresetName.additive, radius_r=0.097, replicas=10_000, block_size=500, workers=4)
        report = run_mdp_study(cfg)
        assert report.flags["oracle_match"], report.summary


class TestControlledConvergence:
    def test_noise_free_errors_decrease(self) -> None:
        report = run_controlled_convergence(_config(replicas=2), noise=False)
        estimates = [row.estimate for row in report.rows]
        assert all(b < a for a, b in zip(estimates, estimates[1:]))
        assert report.flags["decreasing"]
        assert report.summary["control_norm_squared"] == pytest.approx(1.0)

    def test_additive_noise_free_is_exact(self) -> None:
        report = run_controlled_convergence(_config(preset=PresetName.additive, replicas=2), noise=False)
        assert all(row.estimate < 1e-12 for row in report.rows)

    def test_with_noise(self) -> None:
        report = run_controlled_convergence(_config())
        assert report.rows[-1].estimate < report.rows[0].estimate
        assert report.flags == {"decreasing": True, "nonincreasing_within_error": True}

    def test_decreasing_is_strict(self, mocker) -> None:
        # equal means sit inside any error bar but are not a decrease
        mocker.patch("spdelab.experiments._mean_and_error", return_value=(0.5, 0.01))
        report = run_controlled_convergence(_config(replicas=2), noise=False)
        assert report.flags == {"decreasing": False, "nonincreasing_within_error": True}

    def test_rejects_a_foreign_control(self) -> None:
        with pytest.raises(InvalidArgumentError):
            run_controlled_convergence(_config(), default_control(make_grid(15, 50, 0.1)))


class TestWeakContinuityProbe:
    def test_differences_decay(self) -> None:
        report = run_weak_continuity_probe(_config(), n_max=4)
        assert [row.parameter for row in report.rows] == [1.0, 2.0, 3.0, 4.0]
        assert report.flags["decreasing"]
        assert report.summary["decay_ratio"] < 1.0
        assert report.fit.slope < 0.0
        assert all(row.extra["refined"] > 0.0 for row in report.rows)

    @pytest.mark.parametrize("name", [PresetName.additive, PresetName.burgers])
    def test_falls_below_a_tenth_of_the_first_difference(self, name: PresetName) -> None:
        cfg = _config(preset=name, nt=1000)
        assert cfg.n_max == 16
        assert cfg.decay_threshold == 0.10
        report = run_weak_continuity_probe(cfg)
        assert len(report.rows) == 16
        assert report.flags == {"decreasing": True, "below_threshold": True, "stable_under_refinement": True}
        assert report.summary["decay_ratio"] <= 0.10

    def test_eight_frequencies_stay_above_a_tenth(self) -> None:
        # the 1/n decay of a time oscillation leaves about 1/8 at n = 8
        report = run_weak_continuity_probe(_config(preset=PresetName.additive, nt=1000), n_max=8)
        assert not report.flags["below_threshold"]
        assert 0.10 < report.summary["decay_ratio"] < 0.2

    def test_uses_the_configured_frequency_count(self) -> None:
        assert len(run_weak_continuity_probe(_config(n_max=3)).rows) == 3


class TestBoundednessStudy:
    def test_bounded(self, preset) -> None:
        cfg = _config(preset=preset.label)
        report = run_boundedness_study(cfg)
        assert report.flags["bounded"]
        assert report.summary["bound"] >= energy_bound(cfg.initial_profile, cfg.coefficients, cfg.horizon_T)
        assert report.summary["quantile"] == 0.95
        # the supremum includes ‖f‖²_H = 1/2
        assert all(row.estimate >= 0.5 * (1 - 1e-12) for row in report.rows)

    def test_quantile_override(self) -> None:
        assert run_boundedness_study(_config(), quantile=0.5).summary["quantile"] == 0.5


class TestGirsanovProbe:
    @pytest.mark.parametrize("name", list(PresetName))
    def test_identity_holds(self, name: PresetName) -> None:
        report = run_girsanov_probe(_config(preset=name, replicas=8))
        assert report.flags["identity_holds"]
        assert all(row.extra["max_defect"] < 1e-8 for row in report.rows)
