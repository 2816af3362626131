"""Coefficient models for the drift b, the flux g and the noise intensity σ.

A `CoefficientSet` bundles vectorized evaluators `(t, x, r) -> value` together
with the growth constant K and the Lipschitz constant L it claims to satisfy.
`validate_assumptions` checks those claims on a sample lattice.
"""
from __future__ import annotations

import itertools
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pydantic

import spdelab.logging
from spdelab.checks import BaseChecks, Check, Outcome, check
from spdelab.errors import InvalidArgumentError
from spdelab.types import Evaluator, FrozenModel, PresetName

__all__ = (
    "CoefficientSet",
    "PresetInfo",
    "ValidationReport",
    "CoefficientChecks",
    "compose_coefficients",
    "list_presets",
    "make_preset",
    "validate_assumptions",
)

# Spacing of the r lattice; ranges share lattice points so measured constants grow with the range
DEFAULT_R_STEP = 0.125
MAX_TX_SAMPLES = 8
FD_STEP = 1e-5
FD_TOLERANCE = 1e-3


def _shape(*args: Any) -> Tuple[int, ...]:
    return np.broadcast(*[np.asarray(arg) for arg in args]).shape


def zero(t: Any, x: Any, r: Any) -> Any:
    return np.zeros(_shape(t, x, r))


def one(t: Any, x: Any, r: Any) -> Any:
    return np.ones(_shape(t, x, r))


class CoefficientSet(FrozenModel):
    """Evaluators for b, g, σ and their r-derivatives with the constants K and L."""

    label: str
    b: Evaluator = zero
    g: Evaluator = zero
    sigma: Evaluator = one
    db_dr: Evaluator = zero
    dg_dr: Evaluator = zero
    d2g_dr2: Evaluator = zero
    growth_K: pydantic.PositiveFloat = 1.0
    lipschitz_L: pydantic.NonNegativeFloat = 0.0
    description: Optional[str] = None

    def is_additive(self, r_range: Tuple[float, float] = (-4.0, 4.0), samples: int = 5) -> bool:
        """True when b, ∂_r b and ∂_r g vanish and σ ≡ 1 on a sample lattice.

        The linearized and skeleton equations of such a set are the plain heat
        equation forced by the noise or the control.
        """
        t, x, r = np.meshgrid(
            np.linspace(0.0, 1.0, samples), np.linspace(0.0, 1.0, samples), _r_lattice(r_range), indexing="ij"
        )
        return bool(
            np.all(self.b(t, x, r) == 0.0)
            and np.all(self.db_dr(t, x, r) == 0.0)
            and np.all(self.dg_dr(t, x, r) == 0.0)
            and np.all(self.sigma(t, x, r) == 1.0)
        )

    def __str__(self) -> str:
        return f"{self.label}(K={self.growth_K:g}, L={self.lipschitz_L:g})"


class PresetInfo(FrozenModel):
    name: PresetName
    growth_K: float
    lipschitz_L: float
    description: str


_presets: Dict[PresetName, Tuple[PresetInfo, Callable[[], CoefficientSet]]] = {}


def preset(name: PresetName, *, description: str) -> Callable[[Callable[[], CoefficientSet]], Callable[[], CoefficientSet]]:
    """Register a coefficient set factory under a preset name."""

    def decorator(factory: Callable[[], CoefficientSet]) -> Callable[[], CoefficientSet]:
        coefficients = factory()
        info = PresetInfo(
            name=name,
            growth_K=coefficients.growth_K,
            lipschitz_L=coefficients.lipschitz_L,
            description=description,
        )
        _presets[name] = (info, factory)
        return factory

    return decorator


@preset(PresetName.additive, description="heat equation with additive space-time white noise")
def _additive() -> CoefficientSet:
    return CoefficientSet(label=PresetName.additive.value, growth_K=1.0, lipschitz_L=0.0)


def _burgers_g(t: Any, x: Any, r: Any) -> Any:
    return 0.5 * r * r + zero(t, x, r)


def _burgers_dg(t: Any, x: Any, r: Any) -> Any:
    return r + zero(t, x, r)


def _burgers_sigma(t: Any, x: Any, r: Any) -> Any:
    return 1.0 / (1.0 + r * r) + zero(t, x, r)


@preset(PresetName.burgers, description="stochastic Burgers flux r²/2 with bounded noise 1/(1+r²)")
def _burgers() -> CoefficientSet:
    return CoefficientSet(
        label=PresetName.burgers.value,
        g=_burgers_g,
        dg_dr=_burgers_dg,
        d2g_dr2=one,
        sigma=_burgers_sigma,
        growth_K=1.0,
        lipschitz_L=1.0,
    )


def _reaction_b(t: Any, x: Any, r: Any) -> Any:
    return r / (1.0 + r * r) + zero(t, x, r)


def _reaction_db(t: Any, x: Any, r: Any) -> Any:
    r2 = r * r
    return (1.0 - r2) / (1.0 + r2) ** 2 + zero(t, x, r)


def _reaction_sigma(t: Any, x: Any, r: Any) -> Any:
    return np.cos(r) + zero(t, x, r)


@preset(PresetName.reaction_diffusion, description="bounded reaction r/(1+r²) with multiplicative noise cos(r)")
def _reaction_diffusion() -> CoefficientSet:
    return CoefficientSet(
        label=PresetName.reaction_diffusion.value,
        b=_reaction_b,
        db_dr=_reaction_db,
        sigma=_reaction_sigma,
        growth_K=1.0,
        lipschitz_L=2.0,
    )


def make_preset(name: Any) -> CoefficientSet:
    """Build the coefficient set registered under `name`."""
    try:
        key = PresetName(name)
    except ValueError as error:
        known = ", ".join(item.value for item in PresetName)
        raise InvalidArgumentError(f"unknown preset {name!r}: expected one of {known}") from error
    _, factory = _presets[key]
    return factory()


def list_presets() -> List[PresetInfo]:
    return [info for info, _ in _presets.values()]


def compose_coefficients(base: CoefficientSet, *, label: Optional[str] = None, **overrides: Any) -> CoefficientSet:
    """Return a copy of `base` with selected evaluators or constants replaced.

    Pure Burgers with constant noise is
    `compose_coefficients(make_preset("burgers"), sigma=one)`.
    """
    unknown = set(overrides) - set(CoefficientSet.__fields__)
    if unknown:
        raise InvalidArgumentError(f"unknown coefficient fields: {', '.join(sorted(unknown))}")
    fields = {**base.dict(), **overrides, "label": label or f"{base.label}*"}
    return CoefficientSet(**fields)


class ValidationReport(FrozenModel):
    """Outcome of sampling the growth, Lipschitz and derivative claims of a coefficient set."""

    label: str
    r_range: Tuple[float, float]
    samples: int
    flags: Dict[str, bool]
    constants: Dict[str, float]
    witnesses: Dict[str, Dict[str, float]]
    derivative_defects: Dict[str, float]
    checks: List[Check]

    @property
    def passed(self) -> bool:
        return all(self.flags.values())


def _r_lattice(r_range: Tuple[float, float], step: float = DEFAULT_R_STEP) -> np.ndarray:
    low, high = float(r_range[0]), float(r_range[1])
    if not low <= high:
        raise InvalidArgumentError(f"invalid r range [{low}, {high}]")
    inner = np.arange(np.ceil(low / step), np.floor(high / step) + 1) * step
    return np.unique(np.concatenate([[low], inner, [high]]))


class CoefficientChecks(BaseChecks):
    """Sampled verification of the growth and Lipschitz claims of a coefficient set."""

    coefficients: CoefficientSet
    r_range: Tuple[float, float]
    samples: pydantic.conint(ge=2)
    horizon_T: pydantic.PositiveFloat = 1.0

    @property
    def _tx(self) -> List[Tuple[float, float]]:
        n = min(self.samples, MAX_TX_SAMPLES)
        return list(itertools.product(np.linspace(0.0, self.horizon_T, n), np.linspace(0.0, 1.0, n)))

    @property
    def _r(self) -> np.ndarray:
        return _r_lattice(self.r_range)

    def _growth(self, fn: Evaluator, bound: Callable[[np.ndarray], np.ndarray], constant: float) -> Outcome:
        """max |fn| / bound(r) against the declared constant."""
        r = self._r
        worst, witness = 0.0, None
        for t, x in self._tx:
            ratio = np.abs(np.broadcast_to(fn(t, x, r), r.shape)) / bound(r)
            index = int(np.argmax(ratio))
            if ratio[index] > worst or witness is None:
                worst, witness = float(ratio[index]), {"t": float(t), "x": float(x), "r": float(r[index])}
        return Outcome(success=worst <= constant * (1.0 + 1e-9), value=worst, witness=witness)

    def _lipschitz(self, fn: Evaluator, weight: Callable[[np.ndarray, np.ndarray], np.ndarray], constant: float) -> Outcome:
        """All-pairs divided differences |Δfn| / (weight(r₁, r₂)·|Δr|) against the declared constant."""
        r = self._r
        r1, r2 = r[:, None], r[None, :]
        separation = np.abs(r1 - r2)
        off_diagonal = separation > 0
        worst, witness = 0.0, None
        for t, x in self._tx:
            values = np.broadcast_to(fn(t, x, r), r.shape)
            quotient = np.divide(
                np.abs(values[:, None] - values[None, :]),
                weight(r1, r2) * separation,
                out=np.zeros_like(separation),
                where=off_diagonal,
            )
            i, j = np.unravel_index(int(np.argmax(quotient)), quotient.shape)
            if quotient[i, j] > worst or witness is None:
                worst = float(quotient[i, j])
                witness = {"t": float(t), "x": float(x), "r1": float(r[i]), "r2": float(r[j])}
        return Outcome(success=worst <= constant * (1.0 + 1e-9), value=worst, witness=witness)

    def _consistency(self, fn: Evaluator, derivative: Evaluator) -> Outcome:
        """Centered differences of fn against the supplied derivative."""
        r, h = self._r, FD_STEP
        worst, witness, success = 0.0, None, True
        for t, x in self._tx:
            fd = (np.broadcast_to(fn(t, x, r + h), r.shape) - np.broadcast_to(fn(t, x, r - h), r.shape)) / (2.0 * h)
            defect = np.abs(fd - np.broadcast_to(derivative(t, x, r), r.shape))
            success = success and bool(np.all(defect <= FD_TOLERANCE * np.maximum(1.0, np.abs(fd))))
            index = int(np.argmax(defect))
            if defect[index] > worst or witness is None:
                worst, witness = float(defect[index]), {"t": float(t), "x": float(x), "r": float(r[index])}
        return Outcome(success=success, value=worst, witness=witness)

    @check("finite evaluators", id="finite")
    def check_finite(self) -> Outcome:
        r = self._r
        c = self.coefficients
        for t, x in self._tx:
            for name in ("b", "g", "sigma", "db_dr", "dg_dr", "d2g_dr2"):
                values = getattr(c, name)(t, x, r)
                if not np.all(np.isfinite(values)):
                    bad = int(np.argmax(~np.isfinite(np.broadcast_to(values, r.shape))))
                    return Outcome(
                        success=False,
                        message=f"{name} is not finite",
                        witness={"t": float(t), "x": float(x), "r": float(r[bad])},
                    )
        return Outcome(success=True)

    @check("(H1) |b| <= K(1+|r|)", id="h1_b_growth")
    def check_b_growth(self) -> Outcome:
        return self._growth(self.coefficients.b, lambda r: 1.0 + np.abs(r), self.coefficients.growth_K)

    @check("(H1) |g| <= K(1+r²)", id="h1_g_growth")
    def check_g_growth(self) -> Outcome:
        return self._growth(self.coefficients.g, lambda r: 1.0 + r * r, self.coefficients.growth_K)

    @check("(H1) |σ| <= K", id="h1_sigma_bounded")
    def check_sigma_bounded(self) -> Outcome:
        return self._growth(self.coefficients.sigma, np.ones_like, self.coefficients.growth_K)

    @check("(H2) b locally Lipschitz", id="h2_b_lipschitz")
    def check_b_lipschitz(self) -> Outcome:
        return self._lipschitz(self.coefficients.b, _local_weight, self.coefficients.lipschitz_L)

    @check("(H2) g locally Lipschitz", id="h2_g_lipschitz")
    def check_g_lipschitz(self) -> Outcome:
        return self._lipschitz(self.coefficients.g, _local_weight, self.coefficients.lipschitz_L)

    @check("(H2) σ Lipschitz", id="h2_sigma_lipschitz")
    def check_sigma_lipschitz(self) -> Outcome:
        return self._lipschitz(self.coefficients.sigma, _unit_weight, self.coefficients.lipschitz_L)

    @check("(H3) |∂_r b| <= K(1+|r|)", id="h3_db_growth")
    def check_db_growth(self) -> Outcome:
        return self._growth(self.coefficients.db_dr, lambda r: 1.0 + np.abs(r), self.coefficients.growth_K)

    @check("(H3) |∂_r g| <= K(1+|r|)", id="h3_dg_growth")
    def check_dg_growth(self) -> Outcome:
        return self._growth(self.coefficients.dg_dr, lambda r: 1.0 + np.abs(r), self.coefficients.growth_K)

    @check("(H3) |∂²_r g| <= K", id="h3_d2g_bounded")
    def check_d2g_bounded(self) -> Outcome:
        return self._growth(self.coefficients.d2g_dr2, np.ones_like, self.coefficients.growth_K)

    @check("(H3) ∂_r b Lipschitz", id="h3_db_lipschitz")
    def check_db_lipschitz(self) -> Outcome:
        return self._lipschitz(self.coefficients.db_dr, _unit_weight, self.coefficients.lipschitz_L)

    @check("(H3) ∂_r g Lipschitz", id="h3_dg_lipschitz")
    def check_dg_lipschitz(self) -> Outcome:
        return self._lipschitz(self.coefficients.dg_dr, _unit_weight, self.coefficients.lipschitz_L)

    @check("∂_r b matches centered differences of b", id="db_consistency")
    def check_db_consistency(self) -> Outcome:
        return self._consistency(self.coefficients.b, self.coefficients.db_dr)

    @check("∂_r g matches centered differences of g", id="dg_consistency")
    def check_dg_consistency(self) -> Outcome:
        return self._consistency(self.coefficients.g, self.coefficients.dg_dr)

    @check("∂²_r g matches centered differences of ∂_r g", id="d2g_consistency")
    def check_d2g_consistency(self) -> Outcome:
        return self._consistency(self.coefficients.dg_dr, self.coefficients.d2g_dr2)


def _local_weight(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    return 1.0 + np.abs(r1) + np.abs(r2)


def _unit_weight(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    return np.ones(np.broadcast(r1, r2).shape)


CONSISTENCY_CHECKS = ("db_consistency", "dg_consistency", "d2g_consistency")


@spdelab.logging.log_execution_time
def validate_assumptions(
    coefficients: CoefficientSet,
    r_range: Tuple[float, float] = (-20.0, 20.0),
    samples: int = 5,
    *,
    horizon_T: float = 1.0,
) -> ValidationReport:
    """Sample the (H1)-(H3) claims of a coefficient set.

    The derivative condition of (H3) is read on the flux: ∂_r g and ∂²_r g
    are checked. Every failed claim leaves its flag false and records the
    worst sample point as a witness; nothing is raised.
    """
    if samples < 2:
        raise InvalidArgumentError(f"samples must be at least 2 (got {samples})")
    _r_lattice(r_range)

    suite = CoefficientChecks(coefficients=coefficients, r_range=tuple(r_range), samples=samples, horizon_T=horizon_T)
    checks = suite.run_all(halt_on=None)
    for check_ in checks:
        if not check_.success:
            spdelab.logging.logger.debug(f"{coefficients.label}: {check_.name} failed (value={check_.value}, witness={check_.witness})")

    return ValidationReport(
        label=coefficients.label,
        r_range=tuple(r_range),
        samples=samples,
        flags={check_.id: bool(check_.success) for check_ in checks},
        constants={check_.id: check_.value for check_ in checks if check_.value is not None and check_.id not in CONSISTENCY_CHECKS},
        witnesses={check_.id: check_.witness for check_ in checks if check_.witness is not None},
        derivative_defects={check_.id: check_.value for check_ in checks if check_.id in CONSISTENCY_CHECKS and check_.value is not None},
        checks=checks,
    )
