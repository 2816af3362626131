"""The moderate-deviation rate function of a terminal profile.

I(φ) = inf{½‖h‖² : X^h(T) = φ}, where h ↦ X^h(T) is the skeleton map L. The
infimum is attained at h* = L*μ with (L L*)μ = φ; μ is found by a
conjugate-residual iteration in the H inner product, and L* is the exact
discrete transpose of the skeleton scheme.
"""
from __future__ import annotations

import math
from typing import List, Optional

import numpy as np
import pydantic
import scipy.fft

import spdelab.logging
from spdelab.coefficients import CoefficientSet
from spdelab.errors import InvalidArgumentError, NonConvergenceError
from spdelab.lattice import Field, Profile, SpaceTimeGrid, require_same_grid
from spdelab.noise import Control, control_objective
from spdelab.solver import Linearization, PathResult, Scheme, SchemeConfig, solve_skeleton
from spdelab.types import FrozenModel, PathKind

__all__ = (
    "RateResult",
    "AdjointState",
    "SkeletonMap",
    "adjoint_state",
    "apply_adjoint",
    "apply_forward",
    "gaussian_rate_oracle",
    "min_norm_control",
    "mode_gains",
)


class RateResult(FrozenModel):
    """The least-norm control reproducing a target and its energy."""

    target: Profile
    control_star: Control
    rate_value: pydantic.NonNegativeFloat
    forward_residual: pydantic.NonNegativeFloat
    cg_iterations: pydantic.NonNegativeInt
    residual_history: List[float] = []


class AdjointState(FrozenModel):
    """The terminal multiplier μ and the backward trajectory p_n of the adjoint recursion."""

    multiplier: Profile
    backward_field: Field
    control: Control


class SkeletonMap(spdelab.logging.Mixin):
    """The skeleton map L: h ↦ X^h(T) about a fixed u⁰ path and its transpose.

    The per-step linearizations are computed once and shared by every
    forward and adjoint application.
    """

    def __init__(
        self,
        u0_path: PathResult,
        coefficients: CoefficientSet,
        grid: SpaceTimeGrid,
        scheme: Optional[SchemeConfig] = None,
    ) -> None:
        if u0_path.kind != PathKind.deterministic:
            raise InvalidArgumentError(f"expected a deterministic path (got {u0_path.kind.value})")
        require_same_grid(u0_path.field, grid)
        self.grid = grid
        self.u0_path = u0_path
        self.coefficients = coefficients
        self.scheme = Scheme(coefficients, grid, scheme or u0_path.scheme)
        self._linearizations: List[Linearization] = [
            self.scheme.linearization(n, u0_path.values[n]) for n in range(grid.nt)
        ]

    def forward(self, h: np.ndarray) -> np.ndarray:
        """X^h(T) for control cell values `h` of shape (nt, nx)."""
        state = np.zeros(self.grid.nx)
        for n, linearization in enumerate(self._linearizations):
            state = self.scheme.linear_step(linearization, state, self.scheme.control_forcing(linearization, h[n]))
        return state

    def backward(self, mu: np.ndarray) -> tuple:
        """The adjoint recursion from p_N = μ: r_n = A⁻¹p_{n+1}, control_n = σ_n·r_n, p_n = M_nᵀ r_n."""
        nt, nx = self.grid.nt, self.grid.nx
        levels = np.empty((nt + 1, nx))
        controls = np.empty((nt, nx))
        levels[nt] = mu
        for n in reversed(range(nt)):
            linearization = self._linearizations[n]
            r = self.scheme.implicit.solve(levels[n + 1])
            controls[n] = linearization.sigma * r
            levels[n] = linearization.apply_transpose(r)
        return levels, controls

    def adjoint(self, mu: np.ndarray) -> np.ndarray:
        return self.backward(mu)[1]

    def normal(self, mu: np.ndarray) -> np.ndarray:
        """L L* μ."""
        return self.forward(self.adjoint(mu))


def apply_forward(
    h: Control,
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: Optional[SchemeConfig] = None,
) -> Profile:
    """X^h(T), the terminal slice of the skeleton solve."""
    return solve_skeleton(u0_path, coefficients, grid, h, scheme).terminal


def adjoint_state(
    mu: Profile,
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: Optional[SchemeConfig] = None,
) -> AdjointState:
    require_same_grid(mu, grid)
    levels, controls = SkeletonMap(u0_path, coefficients, grid, scheme).backward(mu.values)
    return AdjointState(
        multiplier=mu,
        backward_field=Field(grid=grid, values=levels),
        control=Control(grid=grid, values=controls),
    )


def apply_adjoint(
    mu: Profile,
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    scheme: Optional[SchemeConfig] = None,
) -> Control:
    """L*μ: ⟨apply_forward(h), μ⟩_H = ⟨h, apply_adjoint(μ)⟩_{L²} for every h."""
    return adjoint_state(mu, u0_path, coefficients, grid, scheme).control


def mode_gains(grid: SpaceTimeGrid, theta: float = 1.0, modes: Optional[int] = None) -> np.ndarray:
    """Eigenvalues of L L* on the lattice modes sin(kπx) when b, g vanish and σ ≡ 1.

    Each mode is damped by ρ_k = (1 − (1−θ)dtλ_k)/(1 + θdtλ_k) per step, so
    q_k = dt·α_k²·Σ_{j<nt} ρ_k^{2j} with α_k = 1/(1 + θdtλ_k).
    """
    count = grid.nx if modes is None else min(modes, grid.nx)
    k = np.arange(1, count + 1)
    dt = grid.dt
    eigenvalues = 4.0 / grid.dx ** 2 * np.sin(0.5 * k * np.pi * grid.dx) ** 2
    alpha = 1.0 / (1.0 + theta * dt * eigenvalues)
    rho2 = ((1.0 - (1.0 - theta) * dt * eigenvalues) * alpha) ** 2
    geometric = np.where(
        np.abs(1.0 - rho2) > 1e-14,
        (1.0 - rho2 ** grid.nt) / np.where(rho2 == 1.0, 1.0, 1.0 - rho2),
        float(grid.nt),
    )
    return dt * alpha * alpha * geometric


def _spectral_solve(grid: SpaceTimeGrid, theta: float, rhs: np.ndarray) -> np.ndarray:
    """(L L*)⁻¹ rhs through the sine transform; exact when the coefficients are additive."""
    return scipy.fft.idst(scipy.fft.dst(rhs, type=1) / mode_gains(grid, theta), type=1)


def _h_inner(grid: SpaceTimeGrid, a: np.ndarray, b: np.ndarray) -> float:
    return float(grid.dx * np.dot(a, b))


def _result(target: Profile, h: np.ndarray, residual: float, iterations: int, history: List[float]) -> RateResult:
    control = Control(grid=target.grid, values=h)
    return RateResult(
        target=target,
        control_star=control,
        rate_value=control_objective(control),
        forward_residual=residual,
        cg_iterations=iterations,
        residual_history=history,
    )


@spdelab.logging.log_execution_time
def min_norm_control(
    target: Profile,
    u0_path: PathResult,
    coefficients: CoefficientSet,
    grid: SpaceTimeGrid,
    tol: float = 1e-10,
    max_iter: int = 200,
    scheme: Optional[SchemeConfig] = None,
) -> RateResult:
    """The least-norm control h* with X^{h*}(T) = target and its rate ½‖h*‖².

    Conjugate residuals on (L L*)μ = target keep every iterate h = L*μ in the
    range of the adjoint, so the limit is the minimal-norm preimage. Additive
    coefficients start from the exact spectral solution.

    Raises:
        NonConvergenceError: Raised when `max_iter` iterations leave the
            forward residual above `tol`. The error carries the best iterate.
    """
    if not tol > 0:
        raise InvalidArgumentError(f"tol must be positive (got {tol})")
    require_same_grid(target, grid)
    operator = SkeletonMap(u0_path, coefficients, grid, scheme)
    b = np.asarray(target.values, dtype=float)
    norm = lambda v: math.sqrt(_h_inner(grid, v, v))  # noqa: E731

    if norm(b) == 0.0:
        return _result(target, np.zeros((grid.nt, grid.nx)), 0.0, 0, [0.0])

    mu = np.zeros(grid.nx)
    if coefficients.is_additive():
        mu = _spectral_solve(grid, operator.scheme.config.theta, b)

    r = b - operator.normal(mu)
    history = [norm(r)]
    iterations = 0
    while history[-1] > tol and iterations < max_iter:
        # each cycle restarts from the true residual
        started = iterations
        Ar = operator.normal(r)
        p, Ap = r.copy(), Ar.copy()
        rAr = _h_inner(grid, r, Ar)
        while iterations < max_iter and rAr > 0.0:
            ApAp = _h_inner(grid, Ap, Ap)
            if ApAp == 0.0:
                break
            # exact line search on ‖r − αAp‖ keeps the residual nonincreasing
            alpha = _h_inner(grid, r, Ap) / ApAp
            mu = mu + alpha * p
            r = r - alpha * Ap
            iterations += 1
            history.append(norm(r))
            spdelab.logging.logger.trace(f"conjugate residual iteration {iterations}: ‖r‖ = {history[-1]:.3e}")
            if history[-1] <= tol:
                break
            Ar = operator.normal(r)
            rAr_next = _h_inner(grid, r, Ar)
            beta = rAr_next / rAr
            rAr = rAr_next
            p = r + beta * p
            Ap = Ar + beta * Ap

        r = b - operator.normal(mu)
        if iterations == started:
            break

    h = operator.adjoint(mu)
    residual = norm(b - operator.forward(h))
    spdelab.logging.logger.debug(f"min_norm_control: {iterations} iterations, residual {residual:.3e}")
    if residual > tol:
        best = _result(target, h, residual, iterations, history)
        raise NonConvergenceError(
            f"least-norm control did not reach tol={tol:g} in {max_iter} iterations (residual {residual:.3e})",
            best=best,
            residual_history=history,
        )
    return _result(target, h, residual, iterations, history)


def gaussian_rate_oracle(
    target: Profile,
    horizon_T: float,
    modes: Optional[int] = None,
    coefficients: Optional[CoefficientSet] = None,
) -> float:
    """½Σ φ_k²/q_k with φ_k the √2·sin(kπx) coefficients of the target.

    q_k = (1 − e^{−2k²π²T})/(2k²π²) is the variance of mode k of the
    stochastic heat equation, so this is the rate of the additive preset in
    the continuum.

    The formula never looks at b, g or σ. Passing `coefficients` rejects a
    non-additive set; without it the caller vouches that the target belongs to
    an additive problem and gets the closed form regardless.
    """
    if coefficients is not None and not coefficients.is_additive():
        raise InvalidArgumentError(f"the Gaussian rate oracle needs additive coefficients (got {coefficients.label})")
    grid = target.grid
    count = grid.nx if modes is None else min(modes, grid.nx)
    k = np.arange(1, count + 1)
    basis = math.sqrt(2.0) * np.sin(np.pi * np.outer(k, grid.x))
    phi = grid.dx * basis @ target.values
    lam = (k * np.pi) ** 2
    q = (1.0 - np.exp(-2.0 * lam * horizon_T)) / (2.0 * lam)
    return float(0.5 * np.sum(phi * phi / q))
