"""Closed-form single-ion physics under a two-mode spin-dependent force.

Phase-space trajectories, the spin-up probability, heralded entangled
coherent state (ECS) phonon distributions and their parity, including the
two-level thermal mixture model.
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import TruncationError, UnsupportedConfigurationError, ValidationError, ZeroDetuningError
from .fock_core import (
    TruncationSpec, as_amplitude, coherent_population, default_dimension, displacement_element, displacement_matrix,
)

logger = logging.getLogger(__name__)

MODE_LABELS = ('X', 'Y')
WEIGHTINGS = ('prior', 'herald')


@dataclass(frozen=True)
class ModeParams:
    label: str
    secular_frequency: float
    lamb_dicke: float
    nbar: float = 0.0
    p1: float = 0.0

    def __post_init__(self):
        if self.label not in MODE_LABELS:
            raise ValidationError(f"Mode label must be one of {MODE_LABELS}, got {self.label!r}")
        # zero switches the mode off entirely
        if not 0 <= self.lamb_dicke <= 0.5:
            raise ValidationError(f"lamb_dicke must lie in [0, 0.5], got {self.lamb_dicke}")
        if self.nbar < 0:
            raise ValidationError(f"nbar must be nonnegative, got {self.nbar}")
        if not 0 <= self.p1 <= 0.5:
            raise ValidationError(f"p1 must lie in [0, 0.5], got {self.p1}")
        if self.secular_frequency < 0:
            raise ValidationError(f"secular_frequency must be nonnegative, got {self.secular_frequency}")


@dataclass(frozen=True)
class SDFDrive:
    omega: float
    delta_x: float
    delta_y: float
    phi_s: float = 0.0
    phi_m: float = 0.0
    tau: float = math.inf

    def __post_init__(self):
        if self.omega < 0:
            raise ValidationError(f"Rabi frequency must be nonnegative, got {self.omega}")
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive (use inf for no decay), got {self.tau}")

    @classmethod
    def from_ratio(cls, omega: float, ratio: float, splitting: float, **kwargs) -> 'SDFDrive':
        delta_x, delta_y = detunings_from_ratio(ratio, splitting)
        return cls(omega=omega, delta_x=delta_x, delta_y=delta_y, **kwargs)

    def detuning(self, label: str) -> float:
        if label == 'X':
            return self.delta_x
        if label == 'Y':
            return self.delta_y
        raise ValidationError(f"Unknown mode label {label!r}")

    def with_omega(self, omega: float) -> 'SDFDrive':
        return replace(self, omega=omega)


@dataclass(frozen=True)
class PhononDistribution:
    populations: np.ndarray
    mode_label: str = 'Y'

    def __post_init__(self):
        pops = np.array(self.populations, dtype=float).reshape(-1)
        if np.any(pops < -1e-12) or np.any(pops > 1 + 1e-12):
            raise ValidationError("Phonon populations must lie in [0, 1]")
        if pops.sum() > 1 + 1e-9:
            raise ValidationError(f"Phonon populations sum to {pops.sum():.12f} > 1")
        pops = np.clip(pops, 0.0, 1.0)
        pops.setflags(write=False)
        object.__setattr__(self, 'populations', pops)

    @property
    def n_max(self) -> int:
        return len(self.populations) - 1

    @property
    def total(self) -> float:
        return float(self.populations.sum())

    @property
    def parity(self) -> float:
        return parity(self)

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.populations)), self.populations))


@dataclass(frozen=True)
class EcsState:
    alpha: complex
    beta: complex
    p_x1: float = 0.0
    p_y1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'alpha', as_amplitude(self.alpha))
        object.__setattr__(self, 'beta', as_amplitude(self.beta))
        for name in ('p_x1', 'p_y1'):
            value = getattr(self, name)
            if not 0 <= value <= 0.5:
                raise ValidationError(f"{name} must lie in [0, 0.5], got {value}")


def split_modes(modes: Sequence[ModeParams]) -> Tuple[ModeParams, ModeParams]:
    """Return (X, Y) from a pair given in any order."""
    by_label = {m.label: m for m in modes}
    if len(modes) != 2 or set(by_label) != set(MODE_LABELS):
        raise ValidationError(f"Expected one X and one Y mode, got {[m.label for m in modes]}")
    return by_label['X'], by_label['Y']


def detunings_from_ratio(ratio: float, splitting: float) -> Tuple[float, float]:
    """Solve delta_x / delta_y = R and delta_x - delta_y = splitting."""
    if ratio >= 0:
        raise UnsupportedConfigurationError(
            f"Detuning ratio R={ratio} is not negative; the drive must sit between the two modes",
            {'ratio': ratio},
        )
    if splitting <= 0:
        raise ValidationError(f"Mode splitting must be positive, got {splitting}")
    delta_y = splitting / (ratio - 1)
    return ratio * delta_y, delta_y


def loop_center(drive: SDFDrive, mode: ModeParams) -> complex:
    delta = drive.detuning(mode.label)
    if delta == 0:
        raise ZeroDetuningError(f"Mode {mode.label} is driven on resonance; linear trajectories are not modeled")
    return mode.lamb_dicke * drive.omega / (2 * delta) * complex(math.cos(drive.phi_m), -math.sin(drive.phi_m))


def trajectory(drive: SDFDrive, mode: ModeParams, t):
    """Phase-space displacement of one mode; a circle through the origin."""
    t = np.asarray(t, dtype=float)
    if mode.lamb_dicke == 0 or drive.omega == 0:
        value = np.zeros(t.shape, dtype=complex)
    else:
        delta = drive.detuning(mode.label)
        if delta == 0:
            raise ZeroDetuningError(
                f"Mode {mode.label} is driven on resonance; resonant linear trajectories are not modeled",
                {'mode': mode.label},
            )
        value = loop_center(drive, mode) * (1 - np.exp(-1j * delta * t))
    return complex(value) if value.ndim == 0 else value


def spin_up_probability(drive: SDFDrive, modes: Sequence[ModeParams], t):
    mode_x, mode_y = split_modes(modes)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("Times must be nonnegative")
    alpha2 = np.abs(trajectory(drive, mode_x, t)) ** 2
    beta2 = np.abs(trajectory(drive, mode_y, t)) ** 2
    exponent = -(mode_x.nbar + 0.5) * 4 * alpha2 - (mode_y.nbar + 0.5) * 4 * beta2
    decay = np.exp(-t / drive.tau) if math.isfinite(drive.tau) else 1.0
    value = 0.5 * (1 - np.exp(exponent) * decay)
    return float(value) if np.ndim(value) == 0 else value


def pattern_period(drive: SDFDrive, max_loops: int = 50, rel_tol: float = 1e-6) -> float:
    """Shortest time at which both trajectories close together."""
    fx, fy = abs(drive.delta_x), abs(drive.delta_y)
    if fx == 0 or fy == 0:
        raise ZeroDetuningError("Pattern period needs nonzero detunings on both modes")
    for k in range(1, max_loops + 1):
        period = 2 * math.pi * k / fx
        loops_y = period * fy / (2 * math.pi)
        if abs(loops_y - round(loops_y)) < rel_tol * max(loops_y, 1.0) and round(loops_y) >= 1:
            return period
    raise UnsupportedConfigurationError(
        f"Detunings are not commensurate within {max_loops} loops",
        {'delta_x': drive.delta_x, 'delta_y': drive.delta_y},
    )


def commensurate_ratios(n_loops: int) -> List[float]:
    """Ratios R at which both loops close at T = 2*pi*N / splitting."""
    if n_loops < 2:
        raise ValidationError(f"Need at least two loops of the beat note, got {n_loops}")
    return [k / (k - n_loops) for k in range(1, n_loops)]


def closure_scan(omega: float, modes: Sequence[ModeParams], splitting: float, probe_time: float, offsets) -> np.ndarray:
    """Spin-up probability at the probe time while the drive moves from the X mode toward the Y mode.

    Offsets are measured from the X-mode sideband; minima mark drive
    positions where both loops close.
    """
    offsets = np.asarray(offsets, dtype=float)
    values = np.empty(offsets.shape)
    for i, offset in enumerate(offsets.flat):
        drive = SDFDrive(omega=omega, delta_x=offset, delta_y=offset - splitting)
        values.flat[i] = spin_up_probability(drive, modes, probe_time)
    return values


def offresonant_amplitude(rabi: float, detuning: float) -> float:
    """Peak transfer of a transition driven off resonance."""
    return rabi ** 2 / (rabi ** 2 + detuning ** 2)


def detuned_rabi_factors(rabi: float, detuning: float) -> Tuple[float, float]:
    """(amplitude factor, frequency factor) of a Rabi flop with a small detuning."""
    if rabi <= 0:
        raise ValidationError(f"Rabi frequency must be positive, got {rabi}")
    generalized = math.hypot(rabi, detuning)
    return rabi ** 2 / generalized ** 2, generalized / rabi


def recommended_n_max(beta) -> int:
    b = abs(as_amplitude(beta))
    return max(default_dimension(b), int(math.ceil(2 * b * b + 10)))


def _mixture_weights(p_x1: float, p_y1: float) -> Dict[str, float]:
    # |1>_X|1>_Y is dropped, so the three prior weights are renormalised
    raw = {
        'i': p_x1 * (1 - p_y1),
        'ii': (1 - p_x1) * p_y1,
        'iii': (1 - p_x1) * (1 - p_y1),
    }
    total = sum(raw.values())
    return {case: w / total for case, w in raw.items()}


def _d11(gamma: complex) -> float:
    return displacement_element(gamma, 1, 1).real


def _case_herald(case: str, state: EcsState) -> float:
    a2, b2 = abs(state.alpha) ** 2, abs(state.beta) ** 2
    if case == 'iii':
        return 0.5 * (1 + math.exp(-2 * (a2 + b2)))
    if case == 'i':
        return 0.5 * (1 + _d11(2 * state.alpha) * math.exp(-2 * b2))
    return 0.5 * (1 + math.exp(-2 * a2) * _d11(2 * state.beta))


def _case_distribution(case: str, state: EcsState, n_max: int, tail_tol: float) -> np.ndarray:
    a2, b2 = abs(state.alpha) ** 2, abs(state.beta) ** 2
    n = np.arange(n_max + 1)
    sign = np.where(n % 2 == 0, 1.0, -1.0)
    if case == 'iii':
        poisson = coherent_population(b2, n)
        return poisson * (1 + sign * math.exp(-2 * a2)) / (1 + math.exp(-2 * (a2 + b2)))
    if case == 'i':
        poisson = coherent_population(b2, n)
        d11 = _d11(2 * state.alpha)
        return poisson * (1 + sign * d11) / (1 + d11 * math.exp(-2 * b2))

    dim = max(n_max + 1, default_dimension(abs(state.beta)) + 1)
    trunc = TruncationSpec(dim, tail_tol)
    plus = displacement_matrix(state.beta, trunc).column(1)[: n_max + 1]
    minus = displacement_matrix(-state.beta, trunc).column(1)[: n_max + 1]
    overlap = math.exp(-2 * a2)
    numerator = np.abs(plus) ** 2 + np.abs(minus) ** 2 + 2 * overlap * np.real(minus * np.conj(plus))
    return numerator / (2 * (1 + overlap * _d11(2 * state.beta)))


def _weights(state: EcsState, weighting: str) -> Dict[str, float]:
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    weights = _mixture_weights(state.p_x1, state.p_y1)
    if weighting == 'herald':
        weights = {c: w * _case_herald(c, state) for c, w in weights.items()}
        total = sum(weights.values())
        weights = {c: w / total for c, w in weights.items()}
    return {c: w for c, w in weights.items() if w > 0}


def ecs_distribution(state: EcsState, n_max: int = None, weighting: str = 'prior', tail_tol: float = 1e-9) -> PhononDistribution:
    """Y-mode phonon distribution of the heralded ECS, thermal mixture included."""
    if n_max is None:
        n_max = recommended_n_max(state.beta)
    if n_max < 1:
        raise ValidationError(f"n_max must be at least 1, got {n_max}")

    populations = np.zeros(n_max + 1)
    for case, weight in _weights(state, weighting).items():
        populations = populations + weight * _case_distribution(case, state, n_max, tail_tol)

    tail = 1.0 - float(populations.sum())
    if tail > tail_tol:
        raise TruncationError(
            f"n_max={n_max} leaves {tail:.3e} of the distribution outside (|beta|={abs(state.beta):.3f})",
            tail_mass=tail,
            details={'n_max': n_max},
        )
    return PhononDistribution(populations, 'Y')


def parity(dist) -> float:
    populations = dist.populations if isinstance(dist, PhononDistribution) else np.asarray(dist, dtype=float)
    sign = np.where(np.arange(len(populations)) % 2 == 0, 1.0, -1.0)
    return float(np.dot(sign, populations))


def pure_ecs_parity(alpha_abs: float, beta_abs: float) -> float:
    a2, b2 = alpha_abs ** 2, beta_abs ** 2
    return (math.exp(-2 * a2) + math.exp(-2 * b2)) / (1 + math.exp(-2 * (a2 + b2)))


def ecs_parity(state: EcsState, weighting: str = 'prior') -> float:
    """Closed-form parity of the mixture, no distribution built."""
    a2, b2 = abs(state.alpha) ** 2, abs(state.beta) ** 2
    weights = _weights(state, weighting)
    case_parity = {}
    for case in weights:
        if case == 'iii':
            case_parity[case] = pure_ecs_parity(abs(state.alpha), abs(state.beta))
        elif case == 'i':
            d11 = _d11(2 * state.alpha)
            case_parity[case] = (math.exp(-2 * b2) + d11) / (1 + d11 * math.exp(-2 * b2))
        else:
            d11 = _d11(2 * state.beta)
            case_parity[case] = -(d11 + math.exp(-2 * a2)) / (1 + math.exp(-2 * a2) * d11)
    return float(sum(weights[c] * case_parity[c] for c in weights))


def single_mode_cat_distribution(beta, n_max: int = None) -> PhononDistribution:
    return ecs_distribution(EcsState(alpha=0.0, beta=beta), n_max)
