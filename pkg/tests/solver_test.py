import math

import numpy as np
import pydantic
import pytest

from spdelab.coefficients import CoefficientSet, compose_coefficients, make_preset
from spdelab.errors import DivergenceError, GridMismatchError, InvalidArgumentError
from spdelab.kernels import convolve_J
from spdelab.lattice import Profile, SpaceTimeGrid, h_norms, make_grid
from spdelab.noise import Control, NoiseLattice, NoiseStream, sample_sheet
from spdelab.solver import (
    ImplicitLaplacian,
    PathResult,
    Scheme,
    SchemeConfig,
    Tridiagonal,
    energy_bound,
    exit_time,
    girsanov_defect,
    laplacian,
    sine_test_profiles,
    solve_controlled,
    solve_deterministic,
    solve_linearized,
    solve_moderate,
    solve_skeleton,
    solve_spde,
    weak_form_residual,
)
from spdelab.types import FluxForm, KernelMode, PathKind, PresetName


def _sine(grid: SpaceTimeGrid, k: int = 1, amplitude: float = 1.0) -> Profile:
    return Profile.from_function(grid, lambda x: amplitude * np.sin(k * np.pi * x))


def _smooth_control(grid: SpaceTimeGrid) -> Control:
    return Control.from_function(grid, lambda s, y: np.sin(np.pi * y) * (1.0 + s) + 0.5 * np.sin(2 * np.pi * y))


def _sup_h(values: np.ndarray, grid: SpaceTimeGrid) -> float:
    return float(np.max(h_norms(values, grid.dx, axis=1)))


def _lattice_mode_variances(grid: SpaceTimeGrid) -> np.ndarray:
    """Var⟨Y(T), √2 sin(kπ·)⟩ for the implicit scheme driven by lattice white noise."""
    k = np.arange(1, grid.nx + 1)
    mu = 4.0 / grid.dx ** 2 * np.sin(k * np.pi * grid.dx / 2) ** 2
    a = 1.0 / (1.0 + grid.dt * mu)
    j = np.arange(1, grid.nt + 1)
    return grid.dt * np.sum(a[:, None] ** (2 * j[None, :]), axis=1)


class TestSchemeParts:
    def test_laplacian_of_a_parabola(self) -> None:
        grid = make_grid(9, 1, 1.0)
        x = grid.x
        # the three-point stencil is exact on quadratics vanishing at 0 and 1
        assert laplacian(x * (1 - x), grid.dx) == pytest.approx(np.full(9, -2.0))

    @pytest.mark.parametrize("theta", [0.0, 0.5, 1.0])
    def test_implicit_solve_inverts_matvec(self, small_grid: SpaceTimeGrid, theta: float) -> None:
        operator = ImplicitLaplacian(small_grid, theta)
        rng = np.random.default_rng(1)
        v = rng.normal(size=(small_grid.nx, 4))
        assert np.allclose(operator.solve(operator.matvec(v)), v, rtol=0, atol=1e-12)
        assert np.allclose(operator.solve(operator.matvec(v[:, 0])), v[:, 0], rtol=0, atol=1e-12)

    def test_single_node_grid(self) -> None:
        grid = make_grid(1, 10, 0.1)
        operator = ImplicitLaplacian(grid, 1.0)
        assert operator.solve(operator.matvec(np.array([2.0]))) == pytest.approx([2.0])

    def test_tridiagonal_transpose(self) -> None:
        rng = np.random.default_rng(2)
        n = 12
        T = Tridiagonal(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n))
        dense = np.diag(T.diagonal) + np.diag(T.upper[:-1], 1) + np.diag(T.lower[1:], -1)
        v = rng.normal(size=n)
        assert T.matvec(v) == pytest.approx(dense @ v)
        assert T.rmatvec(v) == pytest.approx(dense.T @ v)

    @pytest.mark.parametrize("flux_form", list(FluxForm))
    @pytest.mark.parametrize("theta", [0.5, 1.0])
    def test_linearization_transpose(self, burgers_path: PathResult, burgers: CoefficientSet, flux_form: FluxForm, theta: float) -> None:
        grid = burgers_path.grid
        scheme = Scheme(burgers, grid, SchemeConfig(theta=theta, flux_form=flux_form))
        linearization = scheme.linearization(3, burgers_path.values[3])
        rng = np.random.default_rng(3)
        for _ in range(10):
            v, w = rng.normal(size=grid.nx), rng.normal(size=grid.nx)
            assert np.dot(linearization.apply(v), w) == pytest.approx(np.dot(v, linearization.apply_transpose(w)), rel=1e-12, abs=1e-12)

    def test_batch_and_single_states_agree(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        scheme = Scheme(burgers, small_grid, SchemeConfig(epsilon=0.01))
        rng = np.random.default_rng(4)
        u = rng.normal(size=(small_grid.nx, 3))
        increments = rng.normal(size=(small_grid.nx, 3))
        batch = scheme.nonlinear_step(5, u, increments, 0.1)
        for column in range(3):
            single = scheme.nonlinear_step(5, u[:, column], increments[:, column], 0.1)
            assert np.allclose(batch[:, column], single, rtol=0, atol=1e-14)

    def test_scheme_config_alias(self) -> None:
        assert SchemeConfig(**{"lambda": 2.0}).lambda_ == 2.0
        assert SchemeConfig(lambda_=2.0, epsilon=0.01).kappa == pytest.approx(0.2)
        with pytest.raises(pydantic.ValidationError):
            SchemeConfig(theta=1.5)


class TestSolveDeterministic:
    def test_eigenfunction_decay(self, additive: CoefficientSet) -> None:
        grid = make_grid(63, 4096, 0.1)
        path = solve_deterministic(_sine(grid), additive, grid)
        exact = math.exp(-math.pi ** 2 * 0.1) * np.sin(np.pi * grid.x)
        assert h_norms(path.terminal.values - exact, grid.dx) <= 0.02 * h_norms(exact, grid.dx)

    def test_zero_is_a_fixed_point(self, preset: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        path = solve_deterministic(Profile.zeros(small_grid), preset, small_grid)
        assert not path.values.any()

    def test_path_metadata(self, burgers_path: PathResult, small_grid: SpaceTimeGrid) -> None:
        assert burgers_path.kind == PathKind.deterministic
        assert burgers_path.grid == small_grid
        assert burgers_path.exit_time_tau == small_grid.horizon_T
        assert burgers_path.diagnostics.shape == (small_grid.nt + 1,)
        assert burgers_path.diagnostics[0] == pytest.approx(1 / math.sqrt(2))

    def test_first_order_in_time(self, burgers: CoefficientSet) -> None:
        terminals = []
        for nt in (100, 200, 400):
            grid = make_grid(15, nt, 0.1)
            terminals.append(solve_deterministic(_sine(grid), burgers, grid).terminal.values)
        dx = 1.0 / 16
        ratio = h_norms(terminals[0] - terminals[1], dx) / h_norms(terminals[1] - terminals[2], dx)
        assert 1.7 < ratio < 2.3

    def test_flux_forms_agree_on_smooth_data(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        centered = solve_deterministic(_sine(small_grid), burgers, small_grid)
        upwind = solve_deterministic(
            _sine(small_grid), burgers, small_grid, SchemeConfig(flux_form=FluxForm.upwind)
        )
        difference = h_norms(centered.terminal.values - upwind.terminal.values, small_grid.dx)
        assert difference < 0.1 * h_norms(centered.terminal.values, small_grid.dx)

    def test_energy_bound(self, preset: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        f = _sine(small_grid, amplitude=2.0)
        path = solve_deterministic(f, preset, small_grid)
        assert float(np.max(path.diagnostics)) ** 2 <= energy_bound(f, preset, small_grid.horizon_T)

    def test_divergence_names_the_step(self, additive: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        explosive = compose_coefficients(additive, b=lambda t, x, r: 1e3 * r ** 3)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as error:
                solve_deterministic(_sine(small_grid, amplitude=10.0), explosive, small_grid)
        assert 0 < error.value.step <= small_grid.nt
        assert error.value.time == pytest.approx(error.value.step * small_grid.dt)

    def test_grid_mismatch(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        with pytest.raises(GridMismatchError):
            solve_deterministic(_sine(make_grid(7, 10, 0.1)), burgers, small_grid)


class TestSolveSpde:
    def test_zero_epsilon_is_deterministic(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid, burgers_path: PathResult) -> None:
        noise = sample_sheet(small_grid, (1, 0))
        path = solve_spde(_sine(small_grid), burgers, small_grid, SchemeConfig(epsilon=0.0), noise)
        assert np.array_equal(path.values, burgers_path.values)
        assert path.kind == PathKind.spde
        assert path.noise == noise

    def test_additive_fluctuation_is_epsilon_free(self, additive: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        noise = sample_sheet(small_grid, (2, 0))
        f = _sine(small_grid)
        u0 = solve_deterministic(f, additive, small_grid).values
        scaled = [
            (solve_spde(f, additive, small_grid, SchemeConfig(epsilon=eps), noise).values - u0) / math.sqrt(eps)
            for eps in (1e-2, 1e-4)
        ]
        assert np.allclose(scaled[0], scaled[1], rtol=0, atol=1e-9)

    def test_additive_variance_matches_lattice_modes(self, additive: CoefficientSet) -> None:
        grid = make_grid(15, 100, 0.1)
        replicas = 8000
        scheme = Scheme(additive, grid, SchemeConfig(epsilon=1.0))
        u = np.zeros((grid.nx, replicas))
        for n, increments in enumerate(NoiseStream(grid, 77, range(replicas))):
            u = scheme.nonlinear_step(n, u, increments, 1.0)
        measured = float(np.mean(h_norms(u, grid.dx, axis=0) ** 2))
        assert measured == pytest.approx(float(np.sum(_lattice_mode_variances(grid))), rel=0.05)

    @pytest.mark.slow
    def test_midpoint_variance(self, additive: CoefficientSet) -> None:
        grid = make_grid(15, 100, 0.1)
        replicas = 40000
        scheme = Scheme(additive, grid, SchemeConfig(epsilon=1.0))
        u = np.zeros((grid.nx, replicas))
        for n, increments in enumerate(NoiseStream(grid, 78, range(replicas))):
            u = scheme.nonlinear_step(n, u, increments, 1.0)
        k = np.arange(1, grid.nx + 1)
        oracle = float(np.sum(2 * np.sin(k * np.pi / 2) ** 2 * _lattice_mode_variances(grid)))
        assert float(np.var(u[grid.nx // 2])) == pytest.approx(oracle, rel=0.05)


class TestSolveLinearized:
    def test_zero_noise(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        path = solve_linearized(burgers_path, burgers, small_grid, None, NoiseLattice.zeros(small_grid))
        assert not path.values.any()

    def test_additive_linearization_is_exact(self, additive: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        noise = sample_sheet(small_grid, (3, 0))
        f = _sine(small_grid)
        u0_path = solve_deterministic(f, additive, small_grid)
        Y = solve_linearized(u0_path, additive, small_grid, None, noise)
        eps = 1e-3
        u = solve_spde(f, additive, small_grid, SchemeConfig(epsilon=eps), noise)
        assert np.allclose((u.values - u0_path.values) / math.sqrt(eps), Y.values, rtol=0, atol=1e-9)

    def test_burgers_fluctuation_converges(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid, burgers_path: PathResult) -> None:
        noise = sample_sheet(small_grid, (4, 0))
        f = _sine(small_grid)
        Y = solve_linearized(burgers_path, burgers, small_grid, None, noise).values
        errors = []
        for eps in (1e-2, 1e-3, 1e-4):
            u = solve_spde(f, burgers, small_grid, SchemeConfig(epsilon=eps), noise).values
            errors.append(_sup_h((u - burgers_path.values) / math.sqrt(eps) - Y, small_grid))
        assert errors[0] > errors[1] > errors[2]

    def test_requires_a_deterministic_path(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        noise = sample_sheet(small_grid, (1, 0))
        stochastic = solve_spde(_sine(small_grid), burgers, small_grid, SchemeConfig(epsilon=0.1), noise)
        with pytest.raises(InvalidArgumentError, match="deterministic"):
            solve_linearized(stochastic, burgers, small_grid, None, noise)


class TestSolveSkeleton:
    def test_zero_control(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        path = solve_skeleton(burgers_path, burgers, small_grid, Control.zeros(small_grid))
        assert not path.values.any()
        assert path.kind == PathKind.skeleton

    def test_linear_in_the_control(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        h1 = _smooth_control(small_grid)
        h2 = Control.from_function(small_grid, lambda s, y: np.cos(3 * s) * y * (1 - y))
        alpha, beta = 2.0, -0.5
        combined = solve_skeleton(burgers_path, burgers, small_grid, alpha * h1 + beta * h2).values
        separate = (
            alpha * solve_skeleton(burgers_path, burgers, small_grid, h1).values
            + beta * solve_skeleton(burgers_path, burgers, small_grid, h2).values
        )
        assert np.max(np.abs(combined - separate)) <= 1e-12 * np.max(np.abs(separate))

    def test_additive_matches_kernel_quadrature(self, additive: CoefficientSet) -> None:
        grid = make_grid(63, 400, 0.1)
        u0_path = solve_deterministic(_sine(grid), additive, grid)
        h = _smooth_control(grid)
        X = solve_skeleton(u0_path, additive, grid, h).terminal.values
        oracle = convolve_J(KernelMode.G, h).terminal.values
        assert h_norms(X - oracle, grid.dx) <= 0.02 * h_norms(oracle, grid.dx)

    def test_norm_grows_with_the_control(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        h = _smooth_control(small_grid)
        norms = [
            _sup_h(solve_skeleton(burgers_path, burgers, small_grid, c * h).values, small_grid) for c in (0.5, 1.0, 2.0)
        ]
        assert norms[0] < norms[1] < norms[2] < math.inf


class TestSolveControlled:
    def test_zero_forcing(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        config = SchemeConfig(epsilon=1e-3, lambda_=2.0)
        path = solve_controlled(_sine(small_grid), burgers, small_grid, config, None, Control.zeros(small_grid))
        assert not path.values.any()
        assert path.kind == PathKind.controlled

    def test_additive_superposition(self, additive: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        noise = sample_sheet(small_grid, (5, 0))
        h = _smooth_control(small_grid)
        f = _sine(small_grid)
        config = SchemeConfig(epsilon=1e-3, lambda_=3.0)
        u0_path = solve_deterministic(f, additive, small_grid)
        controlled = solve_controlled(f, additive, small_grid, config, noise, h, u0_path).values
        Y = solve_linearized(u0_path, additive, small_grid, None, noise).values
        X = solve_skeleton(u0_path, additive, small_grid, h).values
        assert np.allclose(controlled, Y / 3.0 + X, rtol=0, atol=1e-12)

    def test_burgers_converges_to_the_skeleton(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid, burgers_path: PathResult) -> None:
        noise = sample_sheet(small_grid, (6, 0))
        h = _smooth_control(small_grid)
        f = _sine(small_grid)
        X = solve_skeleton(burgers_path, burgers, small_grid, h).values
        errors = []
        for eps in (1e-2, 1e-3, 1e-4):
            config = SchemeConfig(epsilon=eps, lambda_=eps ** -0.25)
            controlled = solve_controlled(f, burgers, small_grid, config, noise, h, burgers_path).values
            errors.append(_sup_h(controlled - X, small_grid))
        assert errors[0] > errors[1] > errors[2]

    def test_requires_positive_epsilon(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        with pytest.raises(InvalidArgumentError, match="epsilon > 0"):
            solve_controlled(_sine(small_grid), burgers, small_grid, SchemeConfig(), None, Control.zeros(small_grid))

    def test_moderate_is_the_rescaled_fluctuation(self, burgers: CoefficientSet, small_grid: SpaceTimeGrid, burgers_path: PathResult) -> None:
        noise = sample_sheet(small_grid, (7, 0))
        config = SchemeConfig(epsilon=1e-3, lambda_=2.0)
        moderate = solve_moderate(_sine(small_grid), burgers, small_grid, config, noise, burgers_path)
        u = solve_spde(_sine(small_grid), burgers, small_grid, config, noise)
        rescaled = (u.values - burgers_path.values) / config.kappa
        assert moderate.kind == PathKind.moderate
        assert _sup_h(moderate.values - rescaled, small_grid) < 1e-8

    @pytest.mark.parametrize("preset_name", list(PresetName))
    def test_girsanov_identity(self, preset_name: PresetName, small_grid: SpaceTimeGrid) -> None:
        coefficients = make_preset(preset_name)
        config = SchemeConfig(epsilon=1e-3, lambda_=1e-3 ** -0.2)
        defect = girsanov_defect(
            _sine(small_grid), coefficients, small_grid, config, sample_sheet(small_grid, (8, 0)), _smooth_control(small_grid)
        )
        assert defect < 1e-8


class TestWeakFormResidual:
    def test_zero_solution(self, additive: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        path = solve_deterministic(Profile.zeros(small_grid), additive, small_grid)
        assert weak_form_residual(path, additive) == 0.0

    def test_first_order_in_time(self, burgers: CoefficientSet) -> None:
        residuals = []
        for nt in (100, 200):
            grid = make_grid(15, nt, 0.1)
            residuals.append(weak_form_residual(solve_deterministic(_sine(grid), burgers, grid), burgers))
        assert 0.4 < residuals[1] / residuals[0] < 0.6

    def test_stochastic_path(self, burgers: CoefficientSet) -> None:
        residuals = []
        for nt in (100, 200):
            grid = make_grid(15, nt, 0.1)
            noise = sample_sheet(grid, (9, 0))
            path = solve_spde(_sine(grid), burgers, grid, SchemeConfig(epsilon=1e-4), noise)
            residuals.append(weak_form_residual(path, burgers))
        assert residuals[1] < residuals[0]

    def test_custom_test_profiles(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        profiles = sine_test_profiles(small_grid, 2)
        assert len(profiles) == 2
        assert weak_form_residual(burgers_path, burgers, profiles) <= weak_form_residual(burgers_path, burgers)
        assert weak_form_residual(burgers_path, burgers, []) == 0.0

    def test_rejects_linear_paths(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        skeleton = solve_skeleton(burgers_path, burgers, small_grid, Control.zeros(small_grid))
        with pytest.raises(InvalidArgumentError):
            weak_form_residual(skeleton, burgers)


class TestExitTime:
    def test_never_exits(self, burgers_path: PathResult) -> None:
        assert exit_time(burgers_path, 10.0) == burgers_path.grid.horizon_T

    def test_exits_immediately(self, burgers_path: PathResult) -> None:
        assert exit_time(burgers_path, 0.1) == 0.0

    def test_nondecreasing_in_the_radius(self, burgers_path: PathResult) -> None:
        radii = np.linspace(0.05, 1.0, 20)
        times = [exit_time(burgers_path, R) for R in radii]
        assert times == sorted(times)

    def test_rejects_nonpositive_radius(self, burgers_path: PathResult) -> None:
        with pytest.raises(InvalidArgumentError):
            exit_time(burgers_path, 0.0)

    def test_stop_radius_is_recorded_not_applied(self, burgers_path: PathResult, burgers: CoefficientSet, small_grid: SpaceTimeGrid) -> None:
        h = _smooth_control(small_grid)
        free = solve_skeleton(burgers_path, burgers, small_grid, h)
        radius = 0.5 * float(np.max(free.diagnostics))
        stopped = solve_skeleton(burgers_path, burgers, small_grid, h, SchemeConfig(stop_radius_R=radius))
        assert 0.0 < stopped.exit_time_tau < small_grid.horizon_T
        assert stopped.exit_time_tau == exit_time(free, radius)
        assert free.exit_time_tau == small_grid.horizon_T
        assert np.array_equal(stopped.values, free.values)
