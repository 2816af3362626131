"""Monte Carlo studies of the small-noise limit theorems.

Every stochastic study draws its noise per replica from `(base_seed, replica)`
and advances all ε values of the grid in lockstep on that common noise.
Replicas are processed in blocks whose size is fixed by the configuration;
blocks run on a thread pool and are reduced in block order, so a report does
not depend on the number of workers.
"""
from __future__ import annotations

import concurrent.futures
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pydantic
import scipy.stats

import spdelab.logging
from spdelab.coefficients import CoefficientSet, make_preset
from spdelab.errors import DivergenceError, InvalidArgumentError
from spdelab.lattice import Profile, SpaceTimeGrid, h_norms, make_grid
from spdelab.noise import Control, NoiseStream
from spdelab.solver import (
    Linearization,
    Scheme,
    SchemeConfig,
    energy_bound,
    solve_deterministic,
    solve_skeleton,
)
from spdelab.types import ExperimentName, FluxForm, FrozenModel, PresetName

__all__ = (
    "StudyConfig",
    "ScalingRow",
    "ScalingReport",
    "SlopeFit",
    "check_epsilon_grid",
    "check_lambda_exponent",
    "default_control",
    "fit_slope",
    "run_boundedness_study",
    "run_clt_study",
    "run_controlled_convergence",
    "run_girsanov_probe",
    "run_mdp_study",
    "run_moment_scaling",
    "run_weak_continuity_probe",
)

CLT_SLOPE_WINDOW = (0.35, 0.65)
MDP_TOLERANCE = 0.30
GIRSANOV_TOLERANCE = 1e-8
EXACT_TOLERANCE = 1e-10


def check_epsilon_grid(v: List[float]) -> List[float]:
    if not v:
        raise ValueError("epsilon_grid must not be empty")
    if any(later >= earlier for earlier, later in zip(v, v[1:])):
        raise ValueError("epsilon_grid must be strictly decreasing")
    return v


def check_lambda_exponent(v: float) -> float:
    # λ = ε^-a grows without bound and √ε·λ = ε^(1/2 - a) vanishes only for 0 < a < 1/2
    if not 0.0 < v < 0.5:
        raise ValueError(f"lambda_exponent_a must lie in (0, 1/2) (got {v})")
    return v


class StudyConfig(FrozenModel):
    """Parameters shared by the Monte Carlo studies."""

    preset: PresetName = PresetName.burgers
    nx: pydantic.PositiveInt = 63
    nt: pydantic.PositiveInt = 4096
    horizon_T: pydantic.PositiveFloat = 0.1
    epsilon_grid: List[pydantic.PositiveFloat] = [1e-2, 1e-3, 1e-4]
    lambda_exponent_a: float = 0.2
    replicas: pydantic.PositiveInt = 200
    delta_threshold: pydantic.PositiveFloat = 0.05
    moment_p: pydantic.confloat(ge=2.0) = 2.0
    radius_r: pydantic.NonNegativeFloat = 0.1
    base_seed: pydantic.conint(ge=0, lt=2 ** 64) = 0

    block_size: pydantic.PositiveInt = 32
    """Replicas advanced together; part of the result, unlike `workers`."""

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

    _validate_epsilon_grid = pydantic.validator("epsilon_grid", allow_reuse=True)(check_epsilon_grid)
    _validate_lambda_exponent = pydantic.validator("lambda_exponent_a", allow_reuse=True)(check_lambda_exponent)

    @property
    def grid(self) -> SpaceTimeGrid:
        return make_grid(self.nx, self.nt, self.horizon_T)

    @property
    def coefficients(self) -> CoefficientSet:
        return make_preset(self.preset)

    @property
    def initial_profile(self) -> Profile:
        amplitude, k = self.initial_amplitude, self.initial_mode
        return Profile.from_function(self.grid, lambda x: amplitude * np.sin(k * np.pi * x))

    def lambda_for(self, epsilon: float) -> float:
        return epsilon ** (-self.lambda_exponent_a)

    def scheme_for(self, epsilon: float = 0.0) -> SchemeConfig:
        return SchemeConfig(
            theta=self.theta,
            flux_form=self.flux_form,
            epsilon=epsilon,
            lambda_=self.lambda_for(epsilon) if epsilon > 0 else 1.0,
            stop_radius_R=self.stop_radius_R,
        )


class ScalingRow(FrozenModel):
    """One estimate of a study: per ε, or per frequency for the weak-continuity probe."""

    epsilon: Optional[float] = None
    lambda_: Optional[float] = pydantic.Field(None, alias="lambda")
    parameter: Optional[float] = None
    estimate: float
    std_error: float
    n_effective: pydantic.NonNegativeInt
    diverged: pydantic.NonNegativeInt = 0
    extra: Dict[str, float] = {}

    class Config:
        allow_population_by_field_name = True


class SlopeFit(FrozenModel):
    """Least-squares fit of log(estimate) against log(parameter)."""

    slope: float
    intercept: float
    r_squared: float
    stderr: float


class ScalingReport(FrozenModel):
    experiment: ExperimentName
    label: str
    rows: List[ScalingRow] = []
    fit: Optional[SlopeFit] = None
    flags: Dict[str, bool] = {}
    summary: Dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return all(self.flags.values())


def fit_slope(x: Sequence[float], y: Sequence[float]) -> Optional[SlopeFit]:
    """Fit log y = slope·log x + intercept; None unless two or more points have positive x and y."""
    pairs = [(a, b) for a, b in zip(x, y) if a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)]
    if len(pairs) < 2:
        return None
    result = scipy.stats.linregress(np.log([a for a, _ in pairs]), np.log([b for _, b in pairs]))
    return SlopeFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        r_squared=float(result.rvalue ** 2),
        stderr=float(result.stderr) if len(pairs) > 2 else 0.0,
    )


def _mean_and_error(values: np.ndarray) -> Tuple[float, float]:
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(values))
    error = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
    return mean, error


def _proportion(hits: np.ndarray) -> Tuple[float, float]:
    if hits.size == 0:
        return float("nan"), float("nan")
    p = float(np.mean(hits))
    return p, math.sqrt(p * (1.0 - p) / hits.size)


def _within(sequence: Sequence[float], errors: Sequence[float]) -> bool:
    """Pairwise nonincreasing within two combined standard errors."""
    for (a, ea), (b, eb) in zip(zip(sequence, errors), zip(sequence[1:], errors[1:])):
        slack = 2.0 * math.sqrt((ea if math.isfinite(ea) else 0.0) ** 2 + (eb if math.isfinite(eb) else 0.0) ** 2)
        if b > a + slack:
            return False
    return True


class _Study(spdelab.logging.Mixin):
    """Shared state of one study run: grid, u⁰ path, schemes and the block runner."""

    def __init__(self, name: ExperimentName, cfg: StudyConfig) -> None:
        self.name = name
        self.cfg = cfg
        self.grid = cfg.grid
        self.coefficients = cfg.coefficients
        self.f = cfg.initial_profile
        self.epsilons = list(cfg.epsilon_grid)
        self.log = self.logger.bind(experiment=name.value)
        self.base_scheme = Scheme(self.coefficients, self.grid, cfg.scheme_for(0.0))
        self.u0_path = solve_deterministic(self.f, self.coefficients, self.grid, cfg.scheme_for(0.0))
        self.u0 = self.u0_path.values
        self._linearizations: Optional[List[Linearization]] = None

    @property
    def linearizations(self) -> List[Linearization]:
        if self._linearizations is None:
            self._linearizations = [self.base_scheme.linearization(n, self.u0[n]) for n in range(self.grid.nt)]
        return self._linearizations

    def schemes(self) -> List[Scheme]:
        """One scheme per ε, carrying that ε's λ and √ελ."""
        return [Scheme(self.coefficients, self.grid, self.cfg.scheme_for(eps)) for eps in self.epsilons]

    def blocks(self) -> List[List[int]]:
        size = self.cfg.block_size
        return [list(range(start, min(start + size, self.cfg.replicas))) for start in range(0, self.cfg.replicas, size)]

    def stream(self, block: Sequence[int]) -> NoiseStream:
        return NoiseStream(self.grid, self.cfg.base_seed, block, chunk=self.cfg.noise_chunk)

    def initial_batch(self, width: int) -> np.ndarray:
        return np.repeat(np.asarray(self.f.values)[:, None], width, axis=1)

    def run_blocks(self, fn: Callable[[List[int]], Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
        """Run `fn` on every replica block and concatenate its arrays along the replica axis (last)."""
        blocks = self.blocks()
        self.log.info(f"{len(blocks)} block(s) of up to {self.cfg.block_size} replicas on {self.cfg.workers} worker(s)")
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            results = list(pool.map(fn, blocks))
        return {key: np.concatenate([result[key] for result in results], axis=-1) for key in results[0]}

    def check_divergence(self, diverged: np.ndarray, first_step: np.ndarray) -> None:
        """Raise once the divergent share of replicas at any ε exceeds the configured fraction."""
        for e, eps in enumerate(self.epsilons):
            count = int(diverged[e].sum())
            if count == 0:
                continue
            self.log.warning(f"ε={eps:g}: {count} of {self.cfg.replicas} replicas diverged; excluded")
            if count > self.cfg.max_divergence_fraction * self.cfg.replicas:
                step = int(first_step[e])
                raise DivergenceError(
                    f"{count} of {self.cfg.replicas} replicas diverged at ε={eps:g}",
                    step=step,
                    time=step * self.grid.dt,
                )

    def note_divergence(self, states: Sequence[np.ndarray], n: int, first_step: np.ndarray) -> None:
        for e, state in enumerate(states):
            if first_step[e] < 0 and not np.all(np.isfinite(state)):
                first_step[e] = n


def _row(cfg: StudyConfig, eps: float, estimate: float, error: float, kept: int, diverged: int, **extra: float) -> ScalingRow:
    return ScalingRow(
        epsilon=eps,
        lambda_=cfg.lambda_for(eps),
        estimate=estimate,
        std_error=error,
        n_effective=kept,
        diverged=diverged,
        extra=extra,
    )


@spdelab.logging.log_execution_time(level="INFO")
def run_clt_study(cfg: StudyConfig) -> ScalingReport:
    """Fluctuations around u⁰: Z^ε = (u^ε − u⁰)/√ε − Y on common noise.

    Rows hold P̂(sup_t ‖Z^ε(t)‖_H > δ); the fit is log E‖Z^ε(T)‖_H against
    log ε, whose slope is ½ when the second-order term dominates.
    """
    study = _Study(ExperimentName.clt, cfg)
    grid, scheme, u0 = study.grid, study.base_scheme, study.u0
    epsilons, linearizations = study.epsilons, study.linearizations
    roots = [math.sqrt(eps) for eps in epsilons]

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        states = [study.initial_batch(width) for _ in epsilons]
        Y = np.zeros((grid.nx, width))
        sup = np.zeros((len(epsilons), width))
        terminal = np.zeros((len(epsilons), width))
        first_step = np.full(len(epsilons), -1)
        with np.errstate(all="ignore"):
            for n, increments in enumerate(study.stream(replicas)):
                linearization = linearizations[n]
                Y = scheme.linear_step(linearization, Y, scheme.noise_forcing(linearization, increments))
                for e, root in enumerate(roots):
                    states[e] = scheme.nonlinear_step(n, states[e], increments, root)
                    Z = (states[e] - u0[n + 1][:, None]) / root - Y
                    norms = h_norms(Z, grid.dx)
                    sup[e] = np.maximum(sup[e], norms)
                    terminal[e] = norms
                study.note_divergence(states, n + 1, first_step)
        diverged = np.stack([~np.all(np.isfinite(state), axis=0) for state in states])
        return {"sup": sup, "terminal": terminal, "diverged": diverged, "first_step": first_step[:, None]}

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    rows, means, probabilities, errors = [], [], [], []
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        p, p_error = _proportion(results["sup"][e][kept] > cfg.delta_threshold)
        mean, mean_error = _mean_and_error(results["terminal"][e][kept])
        study.log.info(f"ε={eps:g}: P̂(sup > δ) = {p:.4f} ± {p_error:.4f}, E‖Z(T)‖ = {mean:.4e}")
        rows.append(_row(cfg, eps, p, p_error, int(kept.sum()), int((~kept).sum()),
                         mean_terminal_norm=mean, mean_terminal_error=mean_error,
                         max_sup_norm=float(np.max(results["sup"][e][kept], initial=0.0))))
        means.append(mean)
        probabilities.append(p)
        errors.append(p_error)

    fit = fit_slope(epsilons, means)
    flags = {"probability_nonincreasing": _within(probabilities, errors)}
    if fit is not None:
        flags["slope_in_window"] = CLT_SLOPE_WINDOW[0] <= fit.slope <= CLT_SLOPE_WINDOW[1]
    if study.coefficients.is_additive():
        flags["exact_linearization"] = max(row.extra["max_sup_norm"] for row in rows) < EXACT_TOLERANCE
    return ScalingReport(experiment=ExperimentName.clt, label=cfg.preset.value, rows=rows, fit=fit, flags=flags)


def _first_steps(stacked: np.ndarray) -> np.ndarray:
    """Earliest divergence step per ε across blocks (−1 when none diverged)."""
    masked = np.where(stacked < 0, np.iinfo(np.int64).max, stacked)
    first = masked.min(axis=-1)
    return np.where(first == np.iinfo(np.int64).max, -1, first)


@spdelab.logging.log_execution_time(level="INFO")
def run_moment_scaling(cfg: StudyConfig) -> ScalingReport:
    """E∫|u^ε(T) − u⁰(T)|^p dx per ε and its slope against ε (expected p/2).

    With `stop_radius_R` set, each replica's difference is frozen at its exit
    time τ^{ε,R} and the estimate is sup_t E∫|u^ε(t∧τ) − u⁰(t∧τ)|^p dx.
    """
    study = _Study(ExperimentName.moment_scaling, cfg)
    grid, scheme, u0 = study.grid, study.base_scheme, study.u0
    epsilons, p = study.epsilons, cfg.moment_p
    roots = [math.sqrt(eps) for eps in epsilons]
    stopped = cfg.stop_radius_R is not None

    def moment(difference: np.ndarray) -> np.ndarray:
        return grid.dx * np.sum(np.abs(difference) ** p, axis=0)

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        states = [study.initial_batch(width) for _ in epsilons]
        first_step = np.full(len(epsilons), -1)
        result: Dict[str, np.ndarray] = {}
        if stopped:
            frozen = [np.zeros((grid.nx, width)) for _ in epsilons]
            alive = [np.ones(width, dtype=bool) for _ in epsilons]
            series = np.zeros((len(epsilons), grid.nt + 1, width))
            exits = np.full((len(epsilons), width), grid.horizon_T)

            def record(n: int) -> None:
                for e in range(len(epsilons)):
                    frozen[e] = np.where(alive[e], states[e] - u0[n][:, None], frozen[e])
                    series[e, n] = moment(frozen[e])
                    leaving = alive[e] & ~(h_norms(states[e], grid.dx) <= cfg.stop_radius_R)
                    exits[e] = np.where(leaving, n * grid.dt, exits[e])
                    alive[e] = alive[e] & ~leaving

            with np.errstate(all="ignore"):
                record(0)
                for n, increments in enumerate(study.stream(replicas)):
                    for e, root in enumerate(roots):
                        states[e] = scheme.nonlinear_step(n, states[e], increments, root)
                    study.note_divergence(states, n + 1, first_step)
                    record(n + 1)
            result["series"] = series
            result["exit"] = exits
        else:
            with np.errstate(all="ignore"):
                for n, increments in enumerate(study.stream(replicas)):
                    for e, root in enumerate(roots):
                        states[e] = scheme.nonlinear_step(n, states[e], increments, root)
                    study.note_divergence(states, n + 1, first_step)
            result["terminal"] = np.stack([moment(state - u0[-1][:, None]) for state in states])
        result["diverged"] = np.stack([~np.all(np.isfinite(state), axis=0) for state in states])
        result["first_step"] = first_step[:, None]
        return result

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    rows, estimates = [], []
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        extra: Dict[str, float] = {}
        if stopped:
            per_time = results["series"][e][:, kept]
            means = per_time.mean(axis=1)
            peak = int(np.argmax(means))
            estimate, error = _mean_and_error(per_time[peak])
            extra["peak_time"] = peak * grid.dt
            extra["mean_exit_time"] = float(np.mean(results["exit"][e][kept]))
        else:
            estimate, error = _mean_and_error(results["terminal"][e][kept])
        extra["scaled"] = estimate / eps ** (p / 2.0)
        study.log.info(f"ε={eps:g}: E∫|u^ε − u⁰|^{p:g} = {estimate:.4e} ± {error:.1e}")
        rows.append(_row(cfg, eps, estimate, error, int(kept.sum()), int((~kept).sum()), **extra))
        estimates.append(estimate)

    fit = fit_slope(epsilons, estimates)
    expected = p / 2.0
    window = 0.1 if study.coefficients.is_additive() else 0.3 * expected
    flags: Dict[str, bool] = {}
    if fit is not None:
        flags["slope_matches"] = abs(fit.slope - expected) <= window
    scaled = [row.extra["scaled"] for row in rows]
    summary = {"expected_slope": expected, "C1_hat": float(max(scaled))}
    flags["C1_finite"] = math.isfinite(summary["C1_hat"])
    return ScalingReport(
        experiment=ExperimentName.moment_scaling, label=cfg.preset.value, rows=rows, fit=fit, flags=flags, summary=summary
    )


def _mode_one_variance(horizon_T: float) -> float:
    """q₁ = (1 − e^{−2π²T})/(2π²)."""
    return (1.0 - math.exp(-2.0 * math.pi ** 2 * horizon_T)) / (2.0 * math.pi ** 2)


@spdelab.logging.log_execution_time(level="INFO")
def run_mdp_study(cfg: StudyConfig) -> ScalingReport:
    """P̂(‖X^ε(T)‖_H ≥ r) for X^ε = (u^ε − u⁰)/(√ελ) and the rate estimate −log P̂/λ².

    For the additive preset the estimates are compared with the Gaussian
    infimum ½r²/q₁; other presets are estimate-only.
    """
    study = _Study(ExperimentName.mdp, cfg)
    grid, u0, epsilons = study.grid, study.u0, study.epsilons
    schemes = study.schemes()

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        states = [np.zeros((grid.nx, width)) for _ in epsilons]
        first_step = np.full(len(epsilons), -1)
        with np.errstate(all="ignore"):
            for n, increments in enumerate(study.stream(replicas)):
                for e, scheme in enumerate(schemes):
                    states[e] = scheme.controlled_step(n, states[e], u0[n], increments)
                study.note_divergence(states, n + 1, first_step)
        return {
            "terminal": np.stack([h_norms(state, grid.dx) for state in states]),
            "diverged": np.stack([~np.all(np.isfinite(state), axis=0) for state in states]),
            "first_step": first_step[:, None],
        }

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    additive = study.coefficients.is_additive()
    oracle = 0.5 * cfg.radius_r ** 2 / _mode_one_variance(grid.horizon_T)
    rows: List[ScalingRow] = []
    resolvable: Optional[ScalingRow] = None
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        probability, error = _proportion(results["terminal"][e][kept] >= cfg.radius_r)
        lam = cfg.lambda_for(eps)
        beyond = probability == 0.0
        rate = float("nan") if beyond else -math.log(probability) / lam ** 2
        if beyond:
            study.log.warning(f"ε={eps:g}: no replica reached ‖X(T)‖ ≥ {cfg.radius_r:g}; beyond Monte Carlo reach")
        else:
            study.log.info(f"ε={eps:g}: P̂ = {probability:.3e}, −log P̂/λ² = {rate:.4f}")
        row = _row(cfg, eps, probability, error, int(kept.sum()), int((~kept).sum()),
                   rate_estimate=rate, beyond_reach=float(beyond))
        rows.append(row)
        if not beyond:
            resolvable = row

    summary = {"radius_r": cfg.radius_r}
    flags: Dict[str, bool] = {}
    if additive:
        summary["oracle_rate"] = oracle
        if resolvable is not None and oracle > 0:
            relative = abs(resolvable.extra["rate_estimate"] - oracle) / oracle
            summary["relative_error"] = relative
            summary["resolved_epsilon"] = float(resolvable.epsilon)
            flags["oracle_match"] = relative <= MDP_TOLERANCE
    return ScalingReport(experiment=ExperimentName.mdp, label=cfg.preset.value, rows=rows, flags=flags, summary=summary)


def default_control(grid: SpaceTimeGrid, norm_squared: float = 1.0, mode: int = 1) -> Control:
    """A time-independent control h(s, y) ∝ sin(kπy) with ∫∫h² = `norm_squared`."""
    return Control.from_function(grid, lambda s, y: np.sin(mode * np.pi * y) + 0.0 * s).scaled_to_energy(norm_squared)


@spdelab.logging.log_execution_time(level="INFO")
def run_controlled_convergence(cfg: StudyConfig, h: Optional[Control] = None, *, noise: bool = True) -> ScalingReport:
    """Mean over replicas of sup_t ‖X̄^{ε,h} − X^h‖_H per ε.

    `noise=False` drives the controlled equation by h alone.
    """
    study = _Study(ExperimentName.controlled, cfg)
    grid, u0, epsilons = study.grid, study.u0, study.epsilons
    h = h if h is not None else default_control(cfg.grid)
    if h.grid != grid:
        raise InvalidArgumentError(f"control grid {h.grid} differs from the study grid {grid}")
    skeleton = solve_skeleton(study.u0_path, study.coefficients, grid, h).values
    schemes = study.schemes()

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        states = [np.zeros((grid.nx, width)) for _ in epsilons]
        sup = np.zeros((len(epsilons), width))
        first_step = np.full(len(epsilons), -1)
        with np.errstate(all="ignore"):
            for n, increments in enumerate(study.stream(replicas)):
                for e, scheme in enumerate(schemes):
                    states[e] = scheme.controlled_step(
                        n, states[e], u0[n], increments if noise else None, h.values[n]
                    )
                    sup[e] = np.maximum(sup[e], h_norms(states[e] - skeleton[n + 1][:, None], grid.dx))
                study.note_divergence(states, n + 1, first_step)
        return {
            "sup": sup,
            "diverged": np.stack([~np.all(np.isfinite(state), axis=0) for state in states]),
            "first_step": first_step[:, None],
        }

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    rows, means, errors = [], [], []
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        mean, error = _mean_and_error(results["sup"][e][kept])
        study.log.info(f"ε={eps:g}: E sup‖X̄ − X^h‖ = {mean:.4e} ± {error:.1e}")
        rows.append(_row(cfg, eps, mean, error, int(kept.sum()), int((~kept).sum())))
        means.append(mean)
        errors.append(error)

    flags = {
        "decreasing": all(b < a for a, b in zip(means, means[1:])),
        "nonincreasing_within_error": _within(means, errors),
    }
    summary = {"terminal_error": means[-1], "control_norm_squared": h.norm_squared}
    return ScalingReport(
        experiment=ExperimentName.controlled,
        label=cfg.preset.value,
        rows=rows,
        fit=fit_slope(epsilons, means),
        flags=flags,
        summary=summary,
    )


def _refine(h: Control, grid: SpaceTimeGrid) -> Control:
    """The same piecewise-constant control on a grid with twice the time steps."""
    return Control(grid=grid, values=np.repeat(h.values, 2, axis=0))


def _weak_differences(cfg: StudyConfig, grid: SpaceTimeGrid, h: Control, n_max: int) -> List[float]:
    coefficients = cfg.coefficients
    u0_path = solve_deterministic(
        Profile.from_function(grid, lambda x: cfg.initial_amplitude * np.sin(cfg.initial_mode * np.pi * x)),
        coefficients,
        grid,
        cfg.scheme_for(0.0),
    )
    base = solve_skeleton(u0_path, coefficients, grid, h).values
    differences = []
    for n in range(1, n_max + 1):
        wave = Control.from_function(grid, lambda s, y, n=n: np.sin(2.0 * np.pi * n * s / grid.horizon_T) + 0.0 * y)
        perturbed = solve_skeleton(u0_path, coefficients, grid, h + wave).values
        differences.append(float(np.max(h_norms(perturbed - base, grid.dx, axis=1))))
    return differences


@spdelab.logging.log_execution_time(level="INFO")
def run_weak_continuity_probe(cfg: StudyConfig, h: Optional[Control] = None, n_max: Optional[int] = None) -> ScalingReport:
    """sup_t ‖X^{h_n} − X^h‖_H for h_n = h + sin(2πns/T), n = 1..n_max.

    The perturbations converge weakly to zero, so the differences decay; the
    probe is repeated with dt halved to separate discretization from decay.
    A unit-amplitude oscillation moves the path by about 2T/(πn), so the last
    difference drops below a tenth of the first only beyond n = 8.
    """
    grid = cfg.grid
    n_max = n_max or cfg.n_max
    h = h if h is not None else default_control(cfg.grid)
    log = spdelab.logging.logger.bind(experiment=ExperimentName.weak_continuity.value)

    differences = _weak_differences(cfg, grid, h, n_max)
    fine_grid = make_grid(grid.nx, 2 * grid.nt, grid.horizon_T)
    refined = _weak_differences(cfg, fine_grid, _refine(h, fine_grid), n_max)

    rows = []
    for n, (coarse, fine) in enumerate(zip(differences, refined), start=1):
        change = abs(fine - coarse) / coarse if coarse > 0 else 0.0
        log.info(f"n={n}: sup‖X^(h_n) − X^h‖ = {coarse:.4e} (dt/2: {fine:.4e})")
        rows.append(ScalingRow(parameter=float(n), estimate=coarse, std_error=0.0, n_effective=1,
                               extra={"refined": fine, "refinement_change": change}))

    first = differences[0]
    flags = {
        "decreasing": all(b < a for a, b in zip(differences, differences[1:])),
        "below_threshold": first > 0 and differences[-1] <= cfg.decay_threshold * first,
        "stable_under_refinement": max(row.extra["refinement_change"] for row in rows) < 0.10,
    }
    return ScalingReport(
        experiment=ExperimentName.weak_continuity,
        label=cfg.preset.value,
        rows=rows,
        fit=fit_slope(range(1, n_max + 1), differences),
        flags=flags,
        summary={"decay_ratio": differences[-1] / first if first > 0 else 0.0},
    )


@spdelab.logging.log_execution_time(level="INFO")
def run_boundedness_study(cfg: StudyConfig, quantile: Optional[float] = None) -> ScalingReport:
    """Empirical quantiles of sup_t ‖u^ε(t)‖²_H per ε against one common bound.

    The bound is the larger of the Gronwall energy bound of u⁰ and the
    quantile at the largest ε.
    """
    study = _Study(ExperimentName.boundedness, cfg)
    grid, scheme, epsilons = study.grid, study.base_scheme, study.epsilons
    roots = [math.sqrt(eps) for eps in epsilons]
    level = quantile if quantile is not None else cfg.quantile

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        states = [study.initial_batch(width) for _ in epsilons]
        sup = np.tile(h_norms(study.initial_batch(width), grid.dx) ** 2, (len(epsilons), 1))
        first_step = np.full(len(epsilons), -1)
        with np.errstate(all="ignore"):
            for n, increments in enumerate(study.stream(replicas)):
                for e, root in enumerate(roots):
                    states[e] = scheme.nonlinear_step(n, states[e], increments, root)
                    sup[e] = np.maximum(sup[e], h_norms(states[e], grid.dx) ** 2)
                study.note_divergence(states, n + 1, first_step)
        return {
            "sup": sup,
            "diverged": np.stack([~np.all(np.isfinite(state), axis=0) for state in states]),
            "first_step": first_step[:, None],
        }

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    rows, quantiles = [], []
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        values = results["sup"][e][kept]
        q = float(np.quantile(values, level)) if values.size else float("nan")
        mean, error = _mean_and_error(values)
        study.log.info(f"ε={eps:g}: q_{level:g}(sup‖u^ε‖²) = {q:.4e}")
        rows.append(_row(cfg, eps, q, error, int(kept.sum()), int((~kept).sum()), mean=mean))
        quantiles.append(q)

    bound = max(energy_bound(study.f, study.coefficients, grid.horizon_T), quantiles[0])
    flags = {"bounded": all(math.isfinite(q) and q <= bound * (1.0 + 1e-9) for q in quantiles)}
    return ScalingReport(
        experiment=ExperimentName.boundedness,
        label=cfg.preset.value,
        rows=rows,
        flags=flags,
        summary={"quantile": level, "bound": bound},
    )


@spdelab.logging.log_execution_time(level="INFO")
def run_girsanov_probe(cfg: StudyConfig, h: Optional[Control] = None) -> ScalingReport:
    """Mean over replicas of sup_t ‖X̄^{ε,h} − (u^ε[W + λ∫∫h] − u⁰)/(√ελ)‖_H per ε."""
    study = _Study(ExperimentName.girsanov, cfg)
    grid, u0, epsilons = study.grid, study.u0, study.epsilons
    h = h if h is not None else default_control(cfg.grid)
    schemes = study.schemes()
    shifts = [scheme.config.lambda_ * grid.dt * grid.dx * h.values for scheme in schemes]

    def block(replicas: List[int]) -> Dict[str, np.ndarray]:
        width = len(replicas)
        controlled = [np.zeros((grid.nx, width)) for _ in epsilons]
        shifted = [study.initial_batch(width) for _ in epsilons]
        sup = np.zeros((len(epsilons), width))
        first_step = np.full(len(epsilons), -1)
        with np.errstate(all="ignore"):
            for n, increments in enumerate(study.stream(replicas)):
                for e, scheme in enumerate(schemes):
                    controlled[e] = scheme.controlled_step(n, controlled[e], u0[n], increments, h.values[n])
                    shifted[e] = scheme.nonlinear_step(
                        n, shifted[e], increments + shifts[e][n][:, None], math.sqrt(scheme.config.epsilon)
                    )
                    rescaled = (shifted[e] - u0[n + 1][:, None]) / scheme.config.kappa
                    sup[e] = np.maximum(sup[e], h_norms(controlled[e] - rescaled, grid.dx))
                study.note_divergence(shifted, n + 1, first_step)
        return {
            "sup": sup,
            "diverged": np.stack([~np.all(np.isfinite(state), axis=0) for state in shifted]),
            "first_step": first_step[:, None],
        }

    results = study.run_blocks(block)
    study.check_divergence(results["diverged"], _first_steps(results["first_step"]))

    rows = []
    for e, eps in enumerate(epsilons):
        kept = ~results["diverged"][e]
        mean, error = _mean_and_error(results["sup"][e][kept])
        rows.append(_row(cfg, eps, mean, error, int(kept.sum()), int((~kept).sum()),
                         max_defect=float(np.max(results["sup"][e][kept], initial=0.0))))
    flags = {"identity_holds": max(row.extra["max_defect"] for row in rows) < GIRSANOV_TOLERANCE}
    return ScalingReport(experiment=ExperimentName.girsanov, label=cfg.preset.value, rows=rows, flags=flags)
