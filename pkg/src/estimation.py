"""Fitting pipeline: blue-sideband traces to phonon distributions, parity curves to drive and thermal parameters."""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq, least_squares

from .dynamics import (
    EcsState, ModeParams, SDFDrive, detunings_from_ratio, ecs_parity, recommended_n_max, single_mode_cat_distribution,
    spin_up_probability, split_modes, trajectory,
)
from .errors import ConvergenceError, RankDeficiencyError, ValidationError
from .expdata import RabiTrace
from .fock_core import sideband_rabi

logger = logging.getLogger(__name__)

GUESS_POLICIES = ('maximize-p0-at-t0', 'explicit')
INITIAL_DISTRIBUTIONS = ('even-cat', 'uniform', 'explicit')
BSB_WEIGHTINGS = ('binomial', 'errors', 'unit')
PARITY_PARAMETERS = ('omega', 'p_x1', 'p_y1', 'delta_x', 'delta_y')


@dataclass
class BsbFitConfig:
    n_max: int = 8
    amplitude_cap: float = 0.97
    omega0_guess_policy: str = 'explicit'
    omega0_guess: Optional[float] = None  # rad/s; the nominal value for the scan policy
    initial_distribution: str = 'even-cat'
    explicit_distribution: Optional[Sequence[float]] = None
    eta: float = 0.11
    fit_tau: bool = True
    tau_guess: float = math.inf
    weighting: str = 'binomial'
    max_iterations: int = 200
    convergence_tol: float = 1e-10
    omega0_drift_limit: float = 0.05
    omega0_scan_span: float = 0.10
    omega0_scan_steps: int = 41
    guess_floor: float = 0.05

    def __post_init__(self):
        if self.n_max < 1:
            raise ValidationError(f"n_max must be at least 1, got {self.n_max}")
        if not 0.9 < self.amplitude_cap <= 1.0:
            raise ValidationError(f"amplitude_cap must lie in (0.9, 1], got {self.amplitude_cap}")
        if self.omega0_guess_policy not in GUESS_POLICIES:
            raise ValidationError(f"omega0_guess_policy must be one of {GUESS_POLICIES}")
        if self.initial_distribution not in INITIAL_DISTRIBUTIONS:
            raise ValidationError(f"initial_distribution must be one of {INITIAL_DISTRIBUTIONS}")
        if self.initial_distribution == 'explicit':
            if self.explicit_distribution is None or len(self.explicit_distribution) != self.n_max + 1:
                raise ValidationError(f"explicit_distribution needs {self.n_max + 1} entries")
        if self.weighting not in BSB_WEIGHTINGS:
            raise ValidationError(f"weighting must be one of {BSB_WEIGHTINGS}")
        if self.omega0_guess is not None and not self.omega0_guess > 0:
            raise ValidationError("omega0_guess must be positive")
        if self.max_iterations < 1 or not self.convergence_tol > 0:
            raise ValidationError("max_iterations and convergence_tol must be positive")


@dataclass
class FitReport:
    parameters: Dict[str, float]
    standard_errors: Dict[str, float]
    covariance: np.ndarray
    parameter_names: List[str]
    residual_norm: float
    iterations: int
    converged: bool
    reduced_chi2: float = float('nan')
    flags: List[str] = field(default_factory=list)
    cost_history: List[float] = field(default_factory=list)
    message: str = ''
    kind: str = 'bsb'

    @property
    def populations(self) -> np.ndarray:
        keys = sorted((k for k in self.parameters if k.startswith('p_') and k[2:].isdigit()), key=lambda k: int(k[2:]))
        return np.array([self.parameters[k] for k in keys])

    @property
    def population_errors(self) -> np.ndarray:
        keys = sorted((k for k in self.standard_errors if k.startswith('p_') and k[2:].isdigit()), key=lambda k: int(k[2:]))
        return np.array([self.standard_errors[k] for k in keys])

    def raise_for_status(self):
        if not self.converged:
            raise ConvergenceError(f"{self.kind} fit did not converge: {self.message}", residual=self.residual_norm,
                                   details={'iterations': self.iterations, 'flags': list(self.flags)})

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'parameters': dict(self.parameters),
            'standard_errors': dict(self.standard_errors),
            'covariance': np.asarray(self.covariance, dtype=float).tolist(),
            'parameter_names': list(self.parameter_names),
            'residual_norm': self.residual_norm,
            'iterations': self.iterations,
            'converged': self.converged,
            'reduced_chi2': self.reduced_chi2,
            'flags': list(self.flags),
            'cost_history': list(self.cost_history),
            'message': self.message,
        }

    @classmethod
    def from_dict(cls, record: Dict) -> 'FitReport':
        fields = dict(record)
        fields['covariance'] = np.asarray(fields.get('covariance', []), dtype=float)
        return cls(**fields)

    def summary(self) -> str:
        status = '✅' if self.converged else '❌'
        flag_text = f" ⚠️ {', '.join(self.flags)}" if self.flags else ''
        return (f"{status} {self.kind} fit: residual {self.residual_norm:.4g}, chi2/dof {self.reduced_chi2:.3g}, "
                f"{self.iterations} evaluations{flag_text}")


def _covariance(weighted_jac: np.ndarray, weighted_residuals: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """(chi2-scaled covariance, unscaled covariance, reduced chi2) from a weighted Jacobian."""
    n_points, n_params = weighted_jac.shape
    unscaled = np.linalg.pinv(weighted_jac.T @ weighted_jac)
    dof = max(n_points - n_params, 1)
    reduced_chi2 = float(np.sum(weighted_residuals ** 2) / dof)
    return unscaled * reduced_chi2, unscaled, reduced_chi2


class _CostTrace:
    """Keeps the best objective seen; each improvement is one accepted step."""

    def __init__(self):
        self.history = []

    def record(self, residuals: np.ndarray):
        cost = 0.5 * float(np.dot(residuals, residuals))
        if not self.history or cost < self.history[-1]:
            self.history.append(cost)
            logger.debug(f"cost {cost:.6e}")


# ---------------------------------------------------------------------------
# Blue-sideband traces

def bsb_model(populations, omega0: float, tau: float, eta: float, t_bsb, amplitude_cap: float = 0.97,
              detuning: float = 0.0):
    """Spin-up probability of a blue-sideband flop over a phonon distribution.

    A nonzero detuning applies the generalized Rabi amplitude and frequency
    to every component (secular-drift hook).
    """
    p = np.asarray(populations, dtype=float)
    if np.any(p < -1e-12) or p.sum() > 1 + 1e-9:
        raise ValidationError("populations must be nonnegative with sum <= 1")
    t = np.asarray(t_bsb, dtype=float)
    rabi = np.array([sideband_rabi(n, omega0, eta) for n in range(len(p))])
    decay = np.exp(-t / tau) if math.isfinite(tau) else np.ones_like(t)
    if detuning:
        generalized = np.sqrt(rabi ** 2 + detuning ** 2)
        amplitude = np.divide(rabi ** 2, generalized ** 2, out=np.zeros_like(rabi), where=generalized > 0)
    else:
        generalized, amplitude = rabi, np.ones_like(rabi)
    flops = 1 - np.cos(np.outer(t, generalized)) * decay[..., None]
    value = amplitude_cap * (flops @ (p * amplitude)) / 2
    return float(value) if np.ndim(value) == 0 else value


def _bsb_sigma(trace: RabiTrace, config: BsbFitConfig, errors) -> np.ndarray:
    if config.weighting == 'errors':
        if errors is None:
            raise ValidationError("weighting='errors' needs per-point errors")
        sigma = np.asarray(errors, dtype=float)
        if np.any(sigma <= 0):
            raise ValidationError("errors must be positive")
        return sigma
    if config.weighting == 'unit':
        return np.ones(len(trace.times))
    shots = np.asarray(trace.shots, dtype=float)
    p = np.asarray(trace.p_up, dtype=float)
    return np.sqrt(np.maximum(p * (1 - p), 0.25 / shots) / shots)


def _bsb_jacobian(populations, omega0, gamma, eta, t, cap, fit_tau):
    """Derivatives with respect to (p_0..p_N, omega0[, gamma])."""
    ratios = np.array([sideband_rabi(n, 1.0, eta) for n in range(len(populations))])
    phase = np.outer(t, ratios * omega0)
    decay = np.exp(-gamma * t)[:, None]
    columns = [cap / 2 * (1 - np.cos(phase) * decay)]
    columns.append((cap / 2 * (np.sin(phase) * decay * t[:, None] * ratios) @ populations)[:, None])
    if fit_tau:
        columns.append((cap / 2 * (np.cos(phase) * decay * t[:, None]) @ populations)[:, None])
    return np.hstack(columns)


def bsb_residuals(trace: RabiTrace, config: BsbFitConfig, populations, omega0: float, tau: float = math.inf,
                  errors=None) -> np.ndarray:
    """Weighted residuals of the model against a trace."""
    model = bsb_model(populations, omega0, tau, config.eta, trace.times, config.amplitude_cap)
    return (model - np.asarray(trace.p_up)) / _bsb_sigma(trace, config, errors)


def _even_cat_guess(trace: RabiTrace, config: BsbFitConfig, omega0: float) -> np.ndarray:
    """Even cat whose mean phonon number matches the early-time curvature of the trace.

    Uses P_up ~ cap * (eta * Omega0 * t / 2)^2 * (nbar + 1), which holds only
    in the Lamb-Dicke regime (eta^2 (nbar + 1) << 1) and for samples before
    the |0>-|1> sideband flop reaches ~0.3 rad; outside that range the guess
    underestimates nbar and the fit has to do the rest.
    """
    t = np.asarray(trace.times)
    p = np.asarray(trace.p_up)
    rabi_10 = sideband_rabi(0, omega0, config.eta)
    early = (t > 0) & (rabi_10 * t < 0.3)
    if early.sum() < 2:
        early = np.flatnonzero(t > 0)[:3]
    curvature = float(np.median(p[early] / t[early] ** 2))
    nbar = max(4 * curvature / (config.amplitude_cap * rabi_10 ** 2) - 1, 0.0)
    nbar = min(nbar, config.n_max / 2)
    beta2 = 0.0 if nbar == 0 else brentq(lambda x: x * math.tanh(x) - nbar, 0.0, nbar + 1)
    logger.debug(f"Even-cat guess: early-time nbar {nbar:.3f} -> |beta| {math.sqrt(beta2):.3f}")
    beta = math.sqrt(beta2)
    dist = single_mode_cat_distribution(beta, max(config.n_max, recommended_n_max(beta)))
    return dist.populations[: config.n_max + 1]


def _initial_populations(trace: RabiTrace, config: BsbFitConfig, omega0: float) -> np.ndarray:
    size = config.n_max + 1
    if config.initial_distribution == 'explicit':
        guess = np.asarray(config.explicit_distribution, dtype=float)
    elif config.initial_distribution == 'uniform':
        guess = np.full(size, 1.0 / size)
    else:
        guess = _even_cat_guess(trace, config, omega0)
    guess = guess / guess.sum()
    # squared variables never leave zero, so every level starts populated
    return (1 - config.guess_floor) * guess + config.guess_floor / size


def _check_trace(trace: RabiTrace, config: BsbFitConfig):
    if len(trace.times) < 2 * (config.n_max + 2):
        raise ValidationError(f"Trace has {len(trace.times)} points; need at least {2 * (config.n_max + 2)}")
    if np.ptp(trace.p_up) == 0:
        raise RankDeficiencyError("Trace is constant; phonon populations are not identifiable",
                                  {'label': trace.label})


def _fit_bsb(trace: RabiTrace, config: BsbFitConfig, omega0_start: float, errors=None, fix_omega0: bool = False):
    t = np.asarray(trace.times, dtype=float)
    data = np.asarray(trace.p_up, dtype=float)
    sigma = _bsb_sigma(trace, config, errors)
    span = float(t[-1] - t[0]) or 1.0
    size = config.n_max + 1
    gamma_start = 0.0 if not math.isfinite(config.tau_guess) else 1.0 / config.tau_guess

    p0 = _initial_populations(trace, config, omega0_start)
    x0 = list(np.sqrt(p0)) + [1.0 - 1e-6]
    lower = [-np.inf] * size + [0.0]
    upper = [np.inf] * size + [1.0]
    if not fix_omega0:
        x0.append(1.0)
        lower.append(1e-3)
        upper.append(np.inf)
    if config.fit_tau:
        x0.append(gamma_start * span)
        lower.append(0.0)
        upper.append(np.inf)

    def unpack(x):
        u2 = x[:size] ** 2
        populations = x[size] * u2 / u2.sum()
        k = size + 1
        omega0 = omega0_start
        if not fix_omega0:
            omega0 = omega0_start * x[k]
            k += 1
        gamma = x[k] / span if config.fit_tau else gamma_start
        return populations, omega0, gamma

    trace_log = _CostTrace()

    def residuals(x):
        populations, omega0, gamma = unpack(x)
        tau = math.inf if gamma == 0 else 1.0 / gamma
        r = (bsb_model(populations, omega0, tau, config.eta, t, config.amplitude_cap) - data) / sigma
        trace_log.record(r)
        return r

    tol = config.convergence_tol
    result = least_squares(residuals, np.array(x0), bounds=(lower, upper), method='trf',
                           xtol=tol, ftol=tol, gtol=tol, max_nfev=config.max_iterations)
    populations, omega0, gamma = unpack(result.x)
    return result, populations, omega0, gamma, sigma, trace_log.history


def scan_omega0(trace: RabiTrace, config: BsbFitConfig, nominal: float = None, errors=None) -> float:
    """Grid over +-span around the nominal carrier; keeps the value with the largest fitted p_0."""
    nominal = nominal or config.omega0_guess
    if nominal is None:
        raise ValidationError("Omega0 scan needs a nominal value")
    _check_trace(trace, config)
    grid = nominal * (1 + np.linspace(-config.omega0_scan_span, config.omega0_scan_span, config.omega0_scan_steps))
    best, best_p0 = nominal, -1.0
    for candidate in grid:
        _, populations, _, _, _, _ = _fit_bsb(trace, config, candidate, errors, fix_omega0=True)
        if populations[0] > best_p0:
            best, best_p0 = float(candidate), float(populations[0])
    logger.info(f"Omega0 scan: best {best / (2 * math.pi * 1e3):.3f} kHz with p0={best_p0:.4f}")
    return best


def fit_bsb_trace(trace: RabiTrace, config: BsbFitConfig, errors=None, omega0_anchor: float = None) -> FitReport:
    """Phonon distribution, carrier Rabi frequency and decay time from one blue-sideband trace."""
    _check_trace(trace, config)
    if config.omega0_guess is None:
        raise ValidationError("omega0_guess is required (nominal value for either policy)")
    if config.omega0_guess_policy == 'maximize-p0-at-t0' and omega0_anchor is None:
        omega0_start = scan_omega0(trace, config, errors=errors)
    else:
        omega0_start = omega0_anchor or config.omega0_guess
    anchor = omega0_anchor or omega0_start

    logger.info(f"Fitting BSB trace {trace.label!r}: N={config.n_max}, {len(trace.times)} points")
    result, populations, omega0, gamma, sigma, history = _fit_bsb(trace, config, omega0_start, errors)

    t = np.asarray(trace.times, dtype=float)
    jac = _bsb_jacobian(populations, omega0, gamma, config.eta, t, config.amplitude_cap, config.fit_tau)
    covariance, unscaled, reduced_chi2 = _covariance(jac / sigma[:, None], result.fun)
    errors_all = np.sqrt(np.clip(np.diag(covariance), 0.0, None))

    names = [f'p_{n}' for n in range(config.n_max + 1)] + ['omega0']
    values = list(populations) + [omega0]
    if config.fit_tau:
        names.append('gamma')
        values.append(gamma)
    parameters = dict(zip(names, map(float, values)))
    standard_errors = dict(zip(names, map(float, errors_all)))
    tau = math.inf if gamma == 0 else 1.0 / gamma
    parameters['tau'] = tau
    standard_errors['tau'] = (standard_errors['gamma'] / gamma ** 2 if config.fit_tau and gamma > 0
                              else (math.inf if config.fit_tau else 0.0))

    flags = []
    drift = abs(omega0 - anchor) / anchor
    if drift > config.omega0_drift_limit:
        flags.append('omega0-drift')
        logger.warning(f"⚠️  Fitted Omega0 moved {drift:.1%} from the anchor {anchor:.4e} rad/s")
    converged = bool(result.status > 0)
    if not converged:
        logger.warning(f"⚠️  BSB fit stopped early: {result.message}")

    report = FitReport(
        parameters=parameters,
        standard_errors=standard_errors,
        covariance=covariance,
        parameter_names=names,
        residual_norm=float(np.linalg.norm(result.fun)),
        iterations=int(result.nfev),
        converged=converged,
        reduced_chi2=reduced_chi2,
        flags=flags,
        cost_history=history,
        message=str(result.message),
        kind='bsb',
    )
    logger.info(report.summary())
    return report


def parity_with_error(report: FitReport) -> Tuple[float, float]:
    """Parity of the fitted distribution and its standard error from the population covariance."""
    populations = report.populations
    signs = np.where(np.arange(len(populations)) % 2 == 0, 1.0, -1.0)
    block = report.covariance[: len(populations), : len(populations)]
    variance = float(signs @ block @ signs)
    return float(signs @ populations), math.sqrt(max(variance, 0.0))


def analyze_ecs_dataset(traces: Sequence[RabiTrace], config: BsbFitConfig) -> Tuple[List[FitReport], pd.DataFrame]:
    """Fit every trace of a t_SDF scan and tabulate parity against t_SDF.

    Omega0 is anchored on the t_SDF = 0 trace and used as the starting value
    for the rest.
    """
    if not traces:
        raise ValidationError("No traces to analyze")
    ordered = sorted(traces, key=lambda tr: float(tr.metadata.get('t_sdf_us', 0.0)))
    anchor_trace = ordered[0]
    if config.omega0_guess_policy == 'maximize-p0-at-t0':
        anchor = scan_omega0(anchor_trace, config)
    else:
        anchor = config.omega0_guess
    if anchor is None:
        raise ValidationError("omega0_guess is required to anchor the dataset")

    reports, rows = [], []
    for i, trace in enumerate(ordered, 1):
        logger.info(f"[{i}/{len(ordered)}] t_SDF = {trace.metadata.get('t_sdf_us', 0.0)} us")
        report = fit_bsb_trace(trace, config, omega0_anchor=anchor)
        value, error = parity_with_error(report)
        reports.append(report)
        rows.append({
            't_sdf_us': float(trace.metadata.get('t_sdf_us', 0.0)),
            'parity': value,
            'parity_error': error,
            'omega0_khz': report.parameters['omega0'] / (2 * math.pi * 1e3),
            'converged': report.converged,
            'flags': ';'.join(report.flags),
        })
    drifted = sum('omega0-drift' in r.flags for r in reports)
    logger.info(f"📊 Dataset: {len(reports)} traces, {drifted} with Omega0 drift above "
                f"{config.omega0_drift_limit:.0%}")
    return reports, pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Parity against t_SDF

def parity_model(t_sdf, drive: SDFDrive, modes: Sequence[ModeParams], thermal: Tuple[float, float] = None,
                 weighting: str = 'prior'):
    """Parity of the heralded Y mode after a force of duration t_sdf, thermal mixture included."""
    mode_x, mode_y = split_modes(modes)
    p_x1, p_y1 = thermal if thermal is not None else (mode_x.p1, mode_y.p1)
    t = np.asarray(t_sdf, dtype=float)
    alpha = np.atleast_1d(trajectory(drive, mode_x, t))
    beta = np.atleast_1d(trajectory(drive, mode_y, t))
    values = np.array([ecs_parity(EcsState(a, b, p_x1, p_y1), weighting) for a, b in zip(alpha, beta)])
    return float(values[0]) if t.ndim == 0 else values.reshape(t.shape)


def _default_parity_bounds() -> Dict[str, Tuple[float, float]]:
    return {'omega': (0.0, np.inf), 'p_x1': (0.0, 0.5), 'p_y1': (0.0, 0.5),
            'delta_x': (0.0, np.inf), 'delta_y': (-np.inf, 0.0)}


@dataclass
class ParityFitConfig:
    """Values double as starting points for free parameters and as fixed values otherwise."""

    free_parameters: Tuple[str, ...] = ('omega', 'p_x1', 'p_y1')
    omega: float = 2 * math.pi * 212.6e3
    p_x1: float = 0.1
    p_y1: float = 0.05
    delta_x: float = 2 * math.pi * 11.12e3
    delta_y: float = -2 * math.pi * 16.68e3
    eta_x: float = 0.05
    eta_y: float = 0.11
    bounds: Dict[str, Tuple[float, float]] = field(default_factory=_default_parity_bounds)
    weighting: str = 'prior'
    max_iterations: int = 200
    convergence_tol: float = 1e-10

    def __post_init__(self):
        self.free_parameters = tuple(self.free_parameters)
        if not self.free_parameters:
            raise ValidationError("At least one parity parameter must be free")
        unknown = set(self.free_parameters) - set(PARITY_PARAMETERS)
        if unknown:
            raise ValidationError(f"Unknown parity parameters {sorted(unknown)}")
        merged = _default_parity_bounds()
        merged.update(self.bounds)
        self.bounds = merged
        for name in PARITY_PARAMETERS:
            low, high = self.bounds[name]
            if not low <= getattr(self, name) <= high:
                raise ValidationError(f"{name}={getattr(self, name)} lies outside its bounds {self.bounds[name]}")

    @classmethod
    def from_ratio(cls, ratio: float, splitting: float, **kwargs) -> 'ParityFitConfig':
        delta_x, delta_y = detunings_from_ratio(ratio, splitting)
        return cls(delta_x=delta_x, delta_y=delta_y, **kwargs)

    def model_inputs(self, values: Dict[str, float]) -> Tuple[SDFDrive, Tuple[ModeParams, ModeParams]]:
        merged = {name: getattr(self, name) for name in PARITY_PARAMETERS}
        merged.update(values)
        drive = SDFDrive(omega=merged['omega'], delta_x=merged['delta_x'], delta_y=merged['delta_y'])
        modes = (ModeParams('X', 0.0, self.eta_x, p1=merged['p_x1']),
                 ModeParams('Y', 0.0, self.eta_y, p1=merged['p_y1']))
        return drive, modes


def _parity_points(points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(points, pd.DataFrame):
        t = points['t_sdf_us'].to_numpy(float) * 1e-6
        return t, points['parity'].to_numpy(float), points['parity_error'].to_numpy(float)
    array = np.asarray(points, dtype=float)
    if array.ndim != 2 or array.shape[1] != 3:
        raise ValidationError("Parity points must be (t_sdf, parity, error) triples")
    return array[:, 0], array[:, 1], array[:, 2]


def fit_parity_curve(points, config: ParityFitConfig) -> FitReport:
    """Weighted least squares of the mixture parity model against (t_sdf [s], parity, error)."""
    t, parity_values, sigma = _parity_points(points)
    if len(t) < 5:
        raise ValidationError(f"Need at least 5 parity points, got {len(t)}")
    if np.any(sigma <= 0):
        raise ValidationError("Parity error bars must be positive")

    names = list(config.free_parameters)
    scales = np.array([abs(getattr(config, n)) if n in ('omega', 'delta_x', 'delta_y') else 1.0 for n in names])
    scales[scales == 0] = 1.0
    x0 = np.array([getattr(config, n) for n in names]) / scales
    lower = np.array([config.bounds[n][0] for n in names]) / scales
    upper = np.array([config.bounds[n][1] for n in names]) / scales
    trace_log = _CostTrace()

    def residuals(x):
        drive, modes = config.model_inputs(dict(zip(names, x * scales)))
        r = (parity_model(t, drive, modes, weighting=config.weighting) - parity_values) / sigma
        trace_log.record(r)
        return r

    logger.info(f"Fitting parity curve: {len(t)} points, free {names}")
    tol = config.convergence_tol
    result = least_squares(residuals, x0, bounds=(lower, upper), method='trf',
                           xtol=tol, ftol=tol, gtol=tol, max_nfev=config.max_iterations)
    values = result.x * scales
    covariance_scaled, unscaled, reduced_chi2 = _covariance(result.jac, result.fun)
    covariance = covariance_scaled * np.outer(scales, scales)
    errors_all = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    raw_errors = np.sqrt(np.clip(np.diag(unscaled), 0.0, None)) * scales

    flags = []
    column_norms = np.linalg.norm(result.jac, axis=0)
    for i, name in enumerate(names):
        low, high = config.bounds[name]
        span = max(abs(values[i]), scales[i]) * 1e-6
        if (math.isfinite(low) and values[i] - low <= span) or (math.isfinite(high) and high - values[i] <= span):
            flags.append(f'at-bound:{name}')
        if column_norms[i] <= 1e-8 * max(column_norms.max(), 1e-300) or raw_errors[i] > abs(values[i]):
            flags.append(f'unidentifiable:{name}')
    for flag in flags:
        logger.warning(f"⚠️  Parity fit flag {flag}")

    report = FitReport(
        parameters=dict(zip(names, map(float, values))),
        standard_errors=dict(zip(names, map(float, errors_all))),
        covariance=covariance,
        parameter_names=names,
        residual_norm=float(np.linalg.norm(result.fun)),
        iterations=int(result.nfev),
        converged=bool(result.status > 0),
        reduced_chi2=reduced_chi2,
        flags=flags,
        cost_history=trace_log.history,
        message=str(result.message),
        kind='parity',
    )
    logger.info(report.summary())
    return report


def mean_phonon_curve(drive: SDFDrive, modes: Sequence[ModeParams], t_grid, thermal: str = 'p1') -> pd.DataFrame:
    """Mean phonon number of each mode: |displacement|^2 plus a thermal term (p1 or nbar)."""
    if thermal not in ('p1', 'nbar'):
        raise ValidationError("thermal must be 'p1' or 'nbar'")
    mode_x, mode_y = split_modes(modes)
    t = np.asarray(t_grid, dtype=float)
    return pd.DataFrame({
        't_s': t,
        'nbar_y': np.abs(trajectory(drive, mode_y, t)) ** 2 + getattr(mode_y, thermal),
        'nbar_x': np.abs(trajectory(drive, mode_x, t)) ** 2 + getattr(mode_x, thermal),
    })


# ---------------------------------------------------------------------------
# Spin evolution and parity scans

def fit_spin_trace(trace: RabiTrace, splitting: float, modes: Sequence[ModeParams], omega_guess: float,
                   ratio_guess: float, fit_tau: bool = True, tau_guess: float = math.inf,
                   max_iterations: int = 200, convergence_tol: float = 1e-10) -> FitReport:
    """Rabi frequency, detuning ratio and decay time from a spin-evolution trace."""
    t = np.asarray(trace.times, dtype=float)
    data = np.asarray(trace.p_up, dtype=float)
    shots = np.asarray(trace.shots, dtype=float)
    sigma = np.sqrt(np.maximum(data * (1 - data), 0.25 / shots) / shots)
    span = float(t[-1] - t[0]) or 1.0
    gamma_start = 0.0 if not math.isfinite(tau_guess) else 1.0 / tau_guess

    names = ['omega', 'ratio'] + (['gamma'] if fit_tau else [])
    x0 = [1.0, ratio_guess] + ([gamma_start * span] if fit_tau else [])
    lower = [1e-6, -np.inf] + ([0.0] if fit_tau else [])
    upper = [np.inf, -1e-9] + ([np.inf] if fit_tau else [])
    trace_log = _CostTrace()

    def physical(x):
        gamma = x[2] / span if fit_tau else gamma_start
        return omega_guess * x[0], x[1], gamma

    def residuals(x):
        omega, ratio, gamma = physical(x)
        drive = SDFDrive.from_ratio(omega, ratio, splitting, tau=math.inf if gamma == 0 else 1.0 / gamma)
        r = (spin_up_probability(drive, modes, t) - data) / sigma
        trace_log.record(r)
        return r

    tol = convergence_tol
    result = least_squares(residuals, np.array(x0), bounds=(lower, upper), method='trf',
                           xtol=tol, ftol=tol, gtol=tol, max_nfev=max_iterations)
    omega, ratio, gamma = physical(result.x)
    covariance, _, reduced_chi2 = _covariance(result.jac, result.fun)
    scales = np.array([omega_guess, 1.0] + ([1.0 / span] if fit_tau else []))
    covariance = covariance * np.outer(scales, scales)
    errors_all = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    values = [omega, ratio] + ([gamma] if fit_tau else [])

    report = FitReport(
        parameters=dict(zip(names, map(float, values))),
        standard_errors=dict(zip(names, map(float, errors_all))),
        covariance=covariance,
        parameter_names=names,
        residual_norm=float(np.linalg.norm(result.fun)),
        iterations=int(result.nfev),
        converged=bool(result.status > 0),
        reduced_chi2=reduced_chi2,
        cost_history=trace_log.history,
        message=str(result.message),
        kind='spin',
    )
    logger.info(report.summary())
    return report


def fit_parity_scan(phases, parity_values, errors=None) -> FitReport:
    """Linear fit of A cos(2 phi) + B sin(2 phi) + C; the amplitude feeds bell_fidelity."""
    phi = np.asarray(phases, dtype=float)
    y = np.asarray(parity_values, dtype=float)
    sigma = np.ones_like(y) if errors is None else np.asarray(errors, dtype=float)
    if len(phi) < 4:
        raise ValidationError("Need at least 4 phases for a parity-scan fit")
    design = np.column_stack([np.cos(2 * phi), np.sin(2 * phi), np.ones_like(phi)])
    weighted = design / sigma[:, None]
    coeffs, *_ = np.linalg.lstsq(weighted, y / sigma, rcond=None)
    residuals = (design @ coeffs - y) / sigma
    scaled, unscaled, reduced_chi2 = _covariance(weighted, residuals)
    # absolute error bars are trusted as given
    covariance = unscaled if errors is not None else scaled

    a, b, c = map(float, coeffs)
    amplitude = math.hypot(a, b)
    gradient = np.array([a, b, 0.0]) / amplitude if amplitude > 0 else np.zeros(3)
    amplitude_error = math.sqrt(max(float(gradient @ covariance @ gradient), 0.0))
    names = ['a_cos', 'b_sin', 'offset']
    standard_errors = dict(zip(names, map(float, np.sqrt(np.clip(np.diag(covariance), 0.0, None)))))
    standard_errors['amplitude'] = amplitude_error
    return FitReport(
        parameters={'a_cos': a, 'b_sin': b, 'offset': c, 'amplitude': amplitude,
                     'phi0': 0.5 * math.atan2(b, a)},
        standard_errors=standard_errors,
        covariance=covariance,
        parameter_names=names,
        residual_norm=float(np.linalg.norm(residuals)),
        iterations=1,
        converged=True,
        reduced_chi2=reduced_chi2,
        kind='parity-scan',
    )
