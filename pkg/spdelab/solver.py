"""Semi-implicit finite differences for the deterministic, stochastic, linearized,
skeleton, controlled and moderate-deviation equations.

Every equation is advanced by one `Scheme`: the Laplacian is θ-implicit and
solved with a single tridiagonal factorization, the drift b and the flux
difference of g are explicit, and lattice white noise enters as σ·ΔW/dx.
All step methods accept a single state `(nx,)` or a replica batch
`(nx, R)`; both shapes run the same arithmetic.
"""
from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pydantic
import scipy.linalg

import spdelab.logging
from spdelab.coefficients import CoefficientSet
from spdelab.errors import DivergenceError, InvalidArgumentError
from spdelab.lattice import Field, Profile, SpaceTimeGrid, h_norms, require_same_grid
from spdelab.noise import Control, NoiseLattice, shift_noise
from spdelab.types import FluxForm, FrozenModel, PathKind

__all__ = (
    "SchemeConfig",
    "PathResult",
    "ImplicitLaplacian",
    "Tridiagonal",
    "Linearization",
    "Scheme",
    "laplacian",
    "energy_bound",
    "exit_time",
    "girsanov_defect",
    "sine_test_profiles",
    "solve_controlled",
    "solve_deterministic",
    "solve_linearized",
    "solve_moderate",
    "solve_skeleton",
    "solve_spde",
    "weak_form_residual",
)


class SchemeConfig(FrozenModel):
    """Parameters of the shared time-stepping scheme."""

    theta: pydantic.confloat(ge=0.0, le=1.0) = 1.0
    flux_form: FluxForm = FluxForm.centered_conservative
    epsilon: pydantic.NonNegativeFloat = 0.0
    lambda_: pydantic.PositiveFloat = pydantic.Field(1.0, alias="lambda")
    stop_radius_R: Optional[pydantic.PositiveFloat] = None

    @property
    def kappa(self) -> float:
        """√ε·λ, the scale between X^ε and u^ε − u⁰."""
        return math.sqrt(self.epsilon) * self.lambda_

    class Config:
        allow_population_by_field_name = True


class PathResult(FrozenModel):
    """One solved trajectory with its H-norm diagnostics and exit time."""

    kind: PathKind
    field: Field
    exit_time_tau: float
    diagnostics: np.ndarray
    scheme: SchemeConfig = SchemeConfig()
    noise: Optional[NoiseLattice] = None

    @pydantic.validator("diagnostics", pre=True)
    @classmethod
    def _validate_diagnostics(cls, v: Any, values: Dict[str, Any]) -> np.ndarray:
        array = np.array(v, dtype=float)
        if "field" in values and array.shape != (values["field"].grid.nt + 1,):
            raise ValueError("diagnostics must hold one H-norm per time level")
        array.setflags(write=False)
        return array

    @pydantic.validator("exit_time_tau")
    @classmethod
    def _validate_exit_time(cls, v: float, values: Dict[str, Any]) -> float:
        if "field" in values and not 0.0 <= v <= values["field"].grid.horizon_T:
            raise ValueError(f"exit time {v} lies outside [0, T]")
        return v

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def terminal(self) -> Profile:
        return self.field.terminal


def laplacian(v: np.ndarray, dx: float) -> np.ndarray:
    """The three-point Laplacian with zero Dirichlet data along axis 0."""
    out = -2.0 * v
    out[1:] += v[:-1]
    out[:-1] += v[1:]
    return out / (dx * dx)


def _column(coefficients: np.ndarray, v: np.ndarray) -> np.ndarray:
    return coefficients if v.ndim == 1 else coefficients[:, None]


class ImplicitLaplacian:
    """Factorization of A = I − θ·dt·Δ, symmetric positive definite and tridiagonal."""

    def __init__(self, grid: SpaceTimeGrid, theta: float) -> None:
        self.grid = grid
        self.theta = theta
        c = theta * grid.dt / grid.dx ** 2
        self._diagonal = np.full(grid.nx, 1.0 + 2.0 * c)
        self._offdiagonal = np.full(grid.nx - 1, -c)
        self._pttrs = None
        if theta > 0.0 and grid.nx > 1:
            pttrf, self._pttrs = scipy.linalg.get_lapack_funcs(("pttrf", "pttrs"), dtype=np.float64)
            self._d, self._e, info = pttrf(self._diagonal, self._offdiagonal)
            if info != 0:
                raise InvalidArgumentError(f"implicit Laplacian is not positive definite (info={info})")

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """A·v, for checking the factorization."""
        if self.theta == 0.0:
            return v.copy()
        return v - self.theta * self.grid.dt * laplacian(v, self.grid.dx)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """A⁻¹·rhs for a single profile or a batch along axis 1."""
        if self.theta == 0.0:
            return rhs.copy()
        if self.grid.nx == 1:
            return rhs / self._diagonal[0]
        x, info = self._pttrs(self._d, self._e, rhs.reshape(self.grid.nx, -1))
        if info != 0:
            raise InvalidArgumentError(f"tridiagonal solve failed (info={info})")
        return x.reshape(rhs.shape)


class Tridiagonal:
    """A tridiagonal matrix with per-row coefficients: (Tv)_i = l_i v_{i-1} + d_i v_i + u_i v_{i+1}."""

    __slots__ = ("lower", "diagonal", "upper")

    def __init__(self, lower: np.ndarray, diagonal: np.ndarray, upper: np.ndarray) -> None:
        self.lower = lower
        self.diagonal = diagonal
        self.upper = upper

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = _column(self.diagonal, v) * v
        out[:-1] += _column(self.upper, v)[:-1] * v[1:]
        out[1:] += _column(self.lower, v)[1:] * v[:-1]
        return out

    def rmatvec(self, z: np.ndarray) -> np.ndarray:
        """Tᵀz."""
        out = _column(self.diagonal, z) * z
        out[1:] += _column(self.upper, z)[:-1] * z[:-1]
        out[:-1] += _column(self.lower, z)[1:] * z[1:]
        return out


class Linearization:
    """The linear step operator M_n about u⁰(t_n) and its exact transpose.

    M_n v = v + (1−θ)dtΔv + dt·∂_r b⊙v + dt·D(∂_r g⊙v), where D is the flux
    difference of the scheme with the upwind switch frozen at u⁰(t_n).
    """

    __slots__ = ("scheme", "db", "dg", "sigma", "flux")

    def __init__(self, scheme: "Scheme", db: np.ndarray, dg: np.ndarray, sigma: np.ndarray, flux: Tridiagonal) -> None:
        self.scheme = scheme
        self.db = db
        self.dg = dg
        self.sigma = sigma
        self.flux = flux

    def apply(self, v: np.ndarray) -> np.ndarray:
        dt = self.scheme.grid.dt
        return (
            self.scheme.explicit(v)
            + dt * (_column(self.db, v) * v)
            + dt * self.flux.matvec(_column(self.dg, v) * v)
        )

    def apply_transpose(self, w: np.ndarray) -> np.ndarray:
        dt = self.scheme.grid.dt
        return (
            self.scheme.explicit(w)
            + dt * (_column(self.db, w) * w)
            + dt * (_column(self.dg, w) * self.flux.rmatvec(w))
        )


class Scheme(spdelab.logging.Mixin):
    """The θ-scheme for one coefficient set on one grid.

    The step methods are the only place the equations are discretized, so
    couplings on common noise and the linearity identities hold to rounding.
    """

    def __init__(self, coefficients: CoefficientSet, grid: SpaceTimeGrid, config: Optional[SchemeConfig] = None) -> None:
        self.coefficients = coefficients
        self.grid = grid
        self.config = config or SchemeConfig()
        self.implicit = ImplicitLaplacian(grid, self.config.theta)

    def nodes(self, u: np.ndarray) -> np.ndarray:
        return self.grid.x if u.ndim == 1 else self.grid.x[:, None]

    def explicit(self, v: np.ndarray) -> np.ndarray:
        """v + (1−θ)·dt·Δv."""
        if self.config.theta == 1.0:
            return v.copy()
        return v + (1.0 - self.config.theta) * self.grid.dt * laplacian(v, self.grid.dx)

    def drift(self, t: float, u: np.ndarray) -> np.ndarray:
        """b(u) + flux difference of g(u), with boundary fluxes g(t, 0, 0) and g(t, 1, 0)."""
        c, dx = self.coefficients, self.grid.dx
        x = self.nodes(u)
        fluxes = np.empty((u.shape[0] + 2,) + u.shape[1:])
        fluxes[0] = c.g(t, 0.0, 0.0)
        fluxes[-1] = c.g(t, 1.0, 0.0)
        fluxes[1:-1] = c.g(t, x, u)
        if self.config.flux_form == FluxForm.centered_conservative:
            difference = (fluxes[2:] - fluxes[:-2]) / (2.0 * dx)
        else:
            forward = (fluxes[2:] - fluxes[1:-1]) / dx
            backward = (fluxes[1:-1] - fluxes[:-2]) / dx
            difference = np.where(c.dg_dr(t, x, u) >= 0.0, forward, backward)
        return c.b(t, x, u) + difference

    def nonlinear_step(
        self, n: int, u: np.ndarray, increments: Optional[np.ndarray] = None, noise_scale: float = 0.0
    ) -> np.ndarray:
        """u(t_n) ↦ u(t_n+1) for u_t = u_xx + b + ∂_x g + noise_scale·σẆ."""
        t, dt = n * self.grid.dt, self.grid.dt
        rhs = self.explicit(u) + dt * self.drift(t, u)
        if noise_scale != 0.0 and increments is not None:
            rhs += noise_scale * self.coefficients.sigma(t, self.nodes(u), u) * increments / self.grid.dx
        return self.implicit.solve(rhs)

    def linearization(self, n: int, u0: np.ndarray) -> Linearization:
        t, x, dx = n * self.grid.dt, self.grid.x, self.grid.dx
        c = self.coefficients
        shape = (self.grid.nx,)
        db = np.broadcast_to(c.db_dr(t, x, u0), shape)
        dg = np.broadcast_to(c.dg_dr(t, x, u0), shape)
        sigma = np.broadcast_to(c.sigma(t, x, u0), shape)
        if self.config.flux_form == FluxForm.centered_conservative:
            half = np.full(shape, 0.5 / dx)
            flux = Tridiagonal(lower=-half, diagonal=np.zeros(shape), upper=half)
        else:
            s = (dg >= 0.0).astype(float)
            flux = Tridiagonal(lower=-(1.0 - s) / dx, diagonal=(1.0 - 2.0 * s) / dx, upper=s / dx)
        return Linearization(self, db, dg, sigma, flux)

    def linear_step(self, linearization: Linearization, v: np.ndarray, forcing: Optional[np.ndarray] = None) -> np.ndarray:
        rhs = linearization.apply(v)
        if forcing is not None:
            rhs += forcing
        return self.implicit.solve(rhs)

    def noise_forcing(self, linearization: Linearization, increments: np.ndarray) -> np.ndarray:
        """σ(u⁰)·ΔW/dx, the forcing of the linearized equation."""
        return _column(linearization.sigma, increments) * increments / self.grid.dx

    def control_forcing(self, linearization: Linearization, h_row: np.ndarray) -> np.ndarray:
        """dt·σ(u⁰)·h, the forcing of the skeleton equation."""
        return self.grid.dt * _column(linearization.sigma, h_row) * h_row

    def controlled_step(
        self,
        n: int,
        X: np.ndarray,
        u0: np.ndarray,
        increments: Optional[np.ndarray] = None,
        h_row: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """One step of X̄ = (u^ε[W + λ∫∫h] − u⁰)/(√ελ) written in the scaled variable.

        The drift is the difference quotient [F(u⁰ + κX) − F(u⁰)]/κ of the full
        scheme drift F, noise enters with weight 1/λ and the control through
        σ(u⁰ + κX)·h.
        """
        kappa, dt = self.config.kappa, self.grid.dt
        t = n * dt
        base = u0 if X.ndim == 1 else u0[:, None]
        state = base + kappa * X
        rhs = self.explicit(X) + dt * (self.drift(t, state) - self.drift(t, base)) / kappa
        if increments is not None or h_row is not None:
            sigma = self.coefficients.sigma(t, self.nodes(X), state)
            if increments is not None:
                rhs += sigma * increments / (self.config.lambda_ * self.grid.dx)
            if h_row is not None:
                rhs += dt * sigma * (h_row if X.ndim == 1 else h_row[:, None])
        return self.implicit.solve(rhs)


def _finite_or_raise(state: np.ndarray, n: int, grid: SpaceTimeGrid, kind: PathKind) -> None:
    if not np.all(np.isfinite(state)):
        raise DivergenceError(
            f"{kind.value} solve produced a non-finite state at step {n} (t={n * grid.dt:g})",
            step=n,
            time=n * grid.dt,
        )


def _path(kind: PathKind, grid: SpaceTimeGrid, values: np.ndarray, config: SchemeConfig, noise: Optional[NoiseLattice] = None) -> PathResult:
    diagnostics = h_norms(values, grid.dx, axis=1)
    tau = grid.horizon_T
    if config.stop_radius_R is not None:
        tau = _first_exit(diagnostics, config.stop_radius_R, grid)
    return PathResult(
        kind=kind,
        field=Field(grid=grid, values=values),
        exit_time_tau=tau,
        diagnostics=diagnostics,
        scheme=config,
        noise=noise,
    )


def _first_exit(norms: np.ndarray, R: float, grid: SpaceTimeGrid) -> float:
    exits = np.flatnonzero(norms > R)
    return float(min(exits[0] * grid.dt, grid.horizon_T)) if exits.size else grid.horizon_T


def _march_nonlinear(
    kind: PathKind,
    f: Profile,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    config: SchemeConfig,
    noise: Optional[NoiseLattice],
    noise_scale: float,
) -> PathResult:
    require_same_grid(f, grid)
    scheme = Scheme(coefficients, grid, config)
    values = np.empty((grid.nt + 1, grid.nx))
    values[0] = f.values
    for n in range(grid.nt):
        increments = noise.increments[n] if noise is not None else None
        values[n + 1] = scheme.nonlinear_step(n, values[n], increments, noise_scale)
        _finite_or_raise(values[n + 1], n + 1, grid, kind)
    return _path(kind, grid, values, config, noise)


@spdelab.logging.log_execution
def solve_deterministic(
    f: Profile, coefficients: CoefficientSet, grid: SpaceTimeGrid, scheme: Optional[SchemeConfig] = None
) -> PathResult:
    """The small-noise limit u⁰: u_t = u_xx + b(t,x,u) + ∂_x g(t,x,u), u(0) = f."""
    return _march_nonlinear(PathKind.deterministic, f, coefficients, grid, scheme or SchemeConfig(), None, 0.0)


@spdelab.logging.log_execution
def solve_spde(
    f: Profile, coefficients: CoefficientSet, grid: SpaceTimeGrid, scheme: SchemeConfig, noise: NoiseLattice
) -> PathResult:
    """u^ε with noise √ε·σ(t,x,u)·ΔW/dx per cell.

    With ε = 0 the noise term is skipped and the result is bitwise the
    deterministic solve.
    """
    require_same_grid(grid, noise)
    return _march_nonlinear(PathKind.spde, f, coefficients, grid, scheme, noise, math.sqrt(scheme.epsilon))


def _require_u0(u0_path: PathResult, grid: SpaceTimeGrid) -> None:
    if u0_path.kind != PathKind.deterministic:
        raise InvalidArgumentError(f"expected a deterministic path (got {u0_path.kind.value})")
    require_same_grid(u0_path.field, grid)


@spdelab.logging.log_execution
def solve_linearized(
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: Optional[SchemeConfig],
    noise: NoiseLattice,
) -> PathResult:
    """Y: Y_t = Y_xx + ∂_r b(u⁰)Y + ∂_x(∂_r g(u⁰)Y) + σ(u⁰)Ẇ, Y(0) = 0."""
    _require_u0(u0_path, grid)
    require_same_grid(grid, noise)
    config = scheme or u0_path.scheme
    stepper = Scheme(coefficients, grid, config)
    values = np.zeros((grid.nt + 1, grid.nx))
    for n in range(grid.nt):
        linearization = stepper.linearization(n, u0_path.values[n])
        forcing = stepper.noise_forcing(linearization, noise.increments[n])
        values[n + 1] = stepper.linear_step(linearization, values[n], forcing)
        _finite_or_raise(values[n + 1], n + 1, grid, PathKind.linearized)
    return _path(PathKind.linearized, grid, values, config, noise)


@spdelab.logging.log_execution
def solve_skeleton(
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    h: Control,
    scheme: Optional[SchemeConfig] = None,
) -> PathResult:
    """X^h: X_t = X_xx + ∂_r b(u⁰)X + ∂_x(∂_r g(u⁰)X) + σ(u⁰)h, X(0) = 0."""
    _require_u0(u0_path, grid)
    require_same_grid(grid, h)
    config = scheme or u0_path.scheme
    stepper = Scheme(coefficients, grid, config)
    values = np.zeros((grid.nt + 1, grid.nx))
    for n in range(grid.nt):
        linearization = stepper.linearization(n, u0_path.values[n])
        forcing = stepper.control_forcing(linearization, h.values[n])
        values[n + 1] = stepper.linear_step(linearization, values[n], forcing)
        _finite_or_raise(values[n + 1], n + 1, grid, PathKind.skeleton)
    return _path(PathKind.skeleton, grid, values, config)


def _march_controlled(
    kind: PathKind,
    f: Profile,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    config: SchemeConfig,
    noise: Optional[NoiseLattice],
    h: Optional[Control],
    u0_path: Optional[PathResult],
) -> PathResult:
    if not config.epsilon > 0:
        raise InvalidArgumentError(f"{kind.value} solve requires epsilon > 0 (got {config.epsilon})")
    if noise is not None:
        require_same_grid(grid, noise)
    if h is not None:
        require_same_grid(grid, h)
    if u0_path is None:
        u0_path = solve_deterministic(f, coefficients, grid, config)
    _require_u0(u0_path, grid)

    stepper = Scheme(coefficients, grid, config)
    values = np.zeros((grid.nt + 1, grid.nx))
    for n in range(grid.nt):
        values[n + 1] = stepper.controlled_step(
            n,
            values[n],
            u0_path.values[n],
            noise.increments[n] if noise is not None else None,
            h.values[n] if h is not None else None,
        )
        _finite_or_raise(values[n + 1], n + 1, grid, kind)
    return _path(kind, grid, values, config, noise)


@spdelab.logging.log_execution
def solve_controlled(
    f: Profile,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: SchemeConfig,
    noise: Optional[NoiseLattice],
    h: Control,
    u0_path: Optional[PathResult] = None,
) -> PathResult:
    """X̄^{ε,h}, the controlled moderate-deviation process, with X̄(0) = 0.

    Equals (u^ε[W + λ∫∫h] − u⁰)/(√ελ) computed with the same scheme; pass
    `noise=None` for the zero-noise reduction.
    """
    return _march_controlled(PathKind.controlled, f, coefficients, grid, scheme, noise, h, u0_path)


@spdelab.logging.log_execution
def solve_moderate(
    f: Profile,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: SchemeConfig,
    noise: NoiseLattice,
    u0_path: Optional[PathResult] = None,
) -> PathResult:
    """X^ε = (u^ε − u⁰)/(√ελ): the controlled equation with h ≡ 0."""
    return _march_controlled(PathKind.moderate, f, coefficients, grid, scheme, noise, None, u0_path)


def girsanov_defect(
    f: Profile,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: SchemeConfig,
    noise: NoiseLattice,
    h: Control,
    u0_path: Optional[PathResult] = None,
) -> float:
    """sup_t ‖X̄^{ε,h} − (u^ε[W + λ∫∫h] − u⁰)/(√ελ)‖_H."""
    if u0_path is None:
        u0_path = solve_deterministic(f, coefficients, grid, scheme)
    controlled = solve_controlled(f, coefficients, grid, scheme, noise, h, u0_path)
    shifted = solve_spde(f, coefficients, grid, scheme, shift_noise(noise, h, scheme.lambda_))
    rescaled = (shifted.values - u0_path.values) / scheme.kappa
    return float(np.max(h_norms(controlled.values - rescaled, grid.dx, axis=1)))


def exit_time(path: PathResult, R: float) -> float:
    """The first lattice time at which ‖u(t)‖_H > R, else T."""
    if not R > 0:
        raise InvalidArgumentError(f"exit radius must be positive (got {R})")
    return _first_exit(path.diagnostics, R, path.grid)


def energy_bound(f: Profile, coefficients: CoefficientSet, horizon_T: float, c: float = 3.0) -> float:
    """(‖f‖²_H + cKT)·e^{cKT}, the discrete Gronwall bound on sup_t ‖u⁰(t)‖²_H."""
    cKT = c * coefficients.growth_K * horizon_T
    return (f.inner(f) + cKT) * math.exp(cKT)


def sine_test_profiles(grid: SpaceTimeGrid, modes: int = 4) -> List[Profile]:
    """The test functions sin(kπx), k = 1..modes."""
    return [Profile.from_function(grid, lambda x, k=k: np.sin(k * np.pi * x)) for k in range(1, modes + 1)]


def weak_form_residual(
    path: PathResult,
    coefficients: CoefficientSet,
    test_profiles: Optional[Sequence[Profile]] = None,
) -> float:
    """Largest defect of the tested (weak) form along a deterministic or stochastic path.

    For each test function φ and time level t_n this is

        ⟨u(t_n), φ⟩ − ⟨f, φ⟩ − Σ_{m<n} dt [⟨u(t_m), Δφ⟩ + ⟨F(u(t_m)), φ⟩] − √ε Σ_{m<n} ⟨σ(u(t_m))ΔW_m, φ⟩/dx

    where Δ is the lattice Laplacian and F is the scheme drift (b plus the
    flux difference of g, which pairs with φ as −⟨g, ∂_xφ⟩). Time sums use
    the left point, so the defect is first order in dt.
    """
    if path.kind not in (PathKind.deterministic, PathKind.spde):
        raise InvalidArgumentError(f"weak form residual is defined for u⁰ and u^ε paths (got {path.kind.value})")
    grid = path.grid
    profiles = list(test_profiles) if test_profiles is not None else sine_test_profiles(grid)
    if not profiles:
        return 0.0
    phi = np.stack([profile.values for profile in profiles], axis=1)
    for profile in profiles:
        require_same_grid(profile, grid)

    scheme = Scheme(coefficients, grid, path.scheme)
    dt, dx = grid.dt, grid.dx
    u = path.values
    lap_phi = laplacian(phi, dx)

    running = np.zeros(phi.shape[1])
    worst = 0.0
    initial = dx * u[0] @ phi
    for n in range(1, grid.nt + 1):
        previous = u[n - 1]
        t = (n - 1) * dt
        running += dt * dx * (previous @ lap_phi + scheme.drift(t, previous) @ phi)
        if path.noise is not None and path.scheme.epsilon > 0:
            sigma = coefficients.sigma(t, grid.x, previous)
            running += math.sqrt(path.scheme.epsilon) * (sigma * path.noise.increments[n - 1]) @ phi
        residual = dx * u[n] @ phi - initial - running
        worst = max(worst, float(np.max(np.abs(residual))))
    return worst
