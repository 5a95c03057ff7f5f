"""Numerically exact reference dynamics in a truncated spin x Fock space.

The single-ion force and the two-ion gate Hamiltonians commute with the
spin operator they couple through, so propagation happens in that
operator's eigenbasis where every step factorizes into small per-mode
matrix exponentials. Heralded ECS states can also be assembled directly
from displacement matrices.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import expm

from .dynamics import ModeParams, PhononDistribution, SDFDrive, split_modes, trajectory
from .errors import CapacityError, ConvergenceError, DegenerateHeraldError, NumericalError, TruncationError, ValidationError
from .fock_core import FockVector, TruncationSpec, annihilation, displacement_matrix
from .ms_gate import ChainModeSet, MSDrive, MSPopulations

logger = logging.getLogger(__name__)

SPIN_DIM = 2
SPIN_INDEX = {'down': 0, 'up': 1}
HERALD_FLOOR = 1e-6
STEPS_PER_PERIOD = 200


class Scheme(str, Enum):
    MIDPOINT = 'midpoint-exponential'
    ADAPTIVE = 'step-halving-adaptive'


@dataclass(frozen=True)
class PropagationSpec:
    step: Optional[float] = None  # seconds; None picks 1/200 of the fastest period
    scheme: str = Scheme.MIDPOINT.value
    tol: float = 1e-6
    max_halvings: int = 8

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValidationError(f"step must be positive, got {self.step}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        object.__setattr__(self, 'scheme', Scheme(self.scheme).value)


@dataclass(frozen=True)
class SimState:
    vector: FockVector
    time: float
    trunc: TruncationSpec
    n_spins: int = 1
    mode_labels: Tuple[str, ...] = ('X', 'Y')

    def __post_init__(self):
        expected = (SPIN_DIM,) * self.n_spins + (self.trunc.dim_per_mode,) * len(self.mode_labels)
        if self.vector.factor_dims != expected:
            raise ValidationError(f"State dims {self.vector.factor_dims} do not match {expected}")
        drift = abs(self.vector.norm_squared() - 1)
        if drift > max(self.trunc.tail_tol, 1e-9):
            raise NumericalError(f"State norm drifted by {drift:.3e}", {'norm_drift': drift})

    def tensor(self) -> np.ndarray:
        return np.array(self.vector.tensor())

    def with_tensor(self, tensor: np.ndarray, time: float) -> 'SimState':
        return SimState(FockVector(tensor, self.vector.factor_dims), time, self.trunc, self.n_spins, self.mode_labels)


def product_state(spin_labels: Sequence[str], fock_indices: Sequence[int], trunc: TruncationSpec,
                  mode_labels: Sequence[str] = ('X', 'Y')) -> SimState:
    if len(fock_indices) != len(mode_labels):
        raise ValidationError("One Fock index per mode is required")
    spins = [SPIN_INDEX[s] for s in spin_labels]
    dims = (SPIN_DIM,) * len(spins) + (trunc.dim_per_mode,) * len(mode_labels)
    vector = FockVector.basis(dims, list(spins) + list(fock_indices))
    return SimState(vector, 0.0, trunc, len(spins), tuple(mode_labels))


def ground_state(trunc: TruncationSpec, n_spins: int = 1, mode_labels: Sequence[str] = ('X', 'Y')) -> SimState:
    return product_state(['down'] * n_spins, [0] * len(mode_labels), trunc, mode_labels)


def _apply_on_axis(tensor: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, tensor, axes=([1], [axis])), 0, axis)


def _spin_eigenbasis(phi: float) -> np.ndarray:
    """Columns |+>, |-> of sigma_phi = cos(phi) sigma_x + sin(phi) sigma_y."""
    phase = complex(math.cos(phi), math.sin(phi))
    return np.array([[1, 1], [phase, -phase]], dtype=complex) / math.sqrt(2)


def _to_eigenbasis(tensor: np.ndarray, n_spins: int, phi: float) -> np.ndarray:
    basis = _spin_eigenbasis(phi).conj().T
    for axis in range(n_spins):
        tensor = _apply_on_axis(tensor, basis, axis)
    return tensor


def _from_eigenbasis(tensor: np.ndarray, n_spins: int, phi: float) -> np.ndarray:
    basis = _spin_eigenbasis(phi)
    for axis in range(n_spins):
        tensor = _apply_on_axis(tensor, basis, axis)
    return tensor


class _ModeStepper:
    """exp(-i dt S c (a e^{-i theta} + a^dag e^{i theta})) for one mode."""

    def __init__(self, dim: int):
        self.a = annihilation(dim)
        self.a_dag = self.a.conj().T

    def unitary(self, strength: float, theta: float, dt: float) -> np.ndarray:
        generator = strength * (self.a * np.exp(-1j * theta) + self.a_dag * np.exp(1j * theta))
        return expm(-1j * dt * generator)


@dataclass
class _Coupling:
    axis: int           # tensor axis of the mode
    strength: float     # coefficient multiplying (a e^{-i theta} + h.c.)
    detuning: float
    phase: float = 0.0
    # spin-configuration -> eigenvalue of the coupled spin operator
    signs: Dict[Tuple[int, ...], float] = field(default_factory=dict)


def _default_step(rates: Sequence[float]) -> float:
    fastest = max((abs(r) for r in rates), default=0.0)
    if fastest == 0:
        return math.inf
    return 2 * math.pi / (STEPS_PER_PERIOD * fastest)


def _midpoint_evolve(tensor: np.ndarray, couplings: List[_Coupling], n_spins: int, dim: int,
                     t0: float, t1: float, n_steps: int) -> np.ndarray:
    """Fixed-step midpoint exponentials; tensor is already in the spin eigenbasis."""
    stepper = _ModeStepper(dim)
    dt = (t1 - t0) / n_steps
    configs = list(product(range(SPIN_DIM), repeat=n_spins))
    tensor = np.array(tensor)
    for step in range(n_steps):
        t_mid = t0 + (step + 0.5) * dt
        for c in couplings:
            theta = c.detuning * t_mid + c.phase
            cache = {}
            for config in configs:
                sign = c.signs[config]
                if sign == 0:
                    continue
                if sign not in cache:
                    cache[sign] = stepper.unitary(sign * c.strength, theta, dt)
                # mode axes shift down by the number of spin axes once a config is selected
                tensor[config] = _apply_on_axis(tensor[config], cache[sign], c.axis - n_spins)
    return tensor


def _evolve(tensor: np.ndarray, couplings: List[_Coupling], n_spins: int, dim: int,
            t0: float, t1: float, spec: PropagationSpec, default_step: float) -> Tuple[np.ndarray, List[Dict]]:
    span = t1 - t0
    if span == 0 or not couplings:
        return tensor, []
    step = spec.step or default_step
    n_steps = max(1, int(math.ceil(span / step - 1e-9)))
    coarse = _midpoint_evolve(tensor, couplings, n_spins, dim, t0, t1, n_steps)
    if spec.scheme == Scheme.MIDPOINT.value:
        return coarse, [{'n_steps': n_steps, 'step_s': span / n_steps, 'max_change': float('nan')}]

    table = []
    for _ in range(spec.max_halvings):
        n_steps *= 2
        fine = _midpoint_evolve(tensor, couplings, n_spins, dim, t0, t1, n_steps)
        change = float(np.max(np.abs(fine - coarse)))
        table.append({'n_steps': n_steps, 'step_s': span / n_steps, 'max_change': change})
        logger.debug(f"step halving: n_steps={n_steps} max|change|={change:.3e}")
        if change < spec.tol:
            return fine, table
        coarse = fine
    raise ConvergenceError(
        f"Step halving did not reach tol={spec.tol:.1e} after {spec.max_halvings} halvings",
        residual=table[-1]['max_change'],
        details={'n_steps': n_steps},
    )


def _check_state(tensor: np.ndarray, state: SimState, tol: float):
    norm2 = float(np.vdot(tensor, tensor).real)
    if abs(norm2 - 1) > max(tol, 1e-9):
        raise NumericalError(f"Propagation changed the norm by {abs(norm2 - 1):.3e}", {'norm_drift': abs(norm2 - 1)})
    probs = np.abs(tensor) ** 2
    for k, label in enumerate(state.mode_labels):
        axis = state.n_spins + k
        top = float(np.take(probs, -1, axis=axis).sum())
        if top > state.trunc.tail_tol:
            raise TruncationError(
                f"Mode {label} puts {top:.3e} at its top Fock level (dim={state.trunc.dim_per_mode})",
                tail_mass=top,
                details={'mode': label},
            )


def _sdf_couplings(state: SimState, drive: SDFDrive, modes: Sequence[ModeParams]) -> Tuple[List[_Coupling], float]:
    if state.n_spins != 1:
        raise ValidationError("The spin-dependent force acts on a single spin")
    by_label = dict(zip('XY', split_modes(modes)))
    couplings, rates = [], []
    for k, label in enumerate(state.mode_labels):
        mode = by_label[label]
        strength = mode.lamb_dicke * drive.omega / 2
        if strength == 0:
            continue
        delta = drive.detuning(label)
        couplings.append(_Coupling(axis=1 + k, strength=strength, detuning=delta, phase=drive.phi_m,
                                   signs={(0,): 1.0, (1,): -1.0}))
        rates.extend([delta, mode.lamb_dicke * drive.omega])
    return couplings, _default_step(rates)


def propagate_sdf(initial: SimState, drive: SDFDrive, modes: Sequence[ModeParams], t_final: float,
                  spec: PropagationSpec = None) -> SimState:
    spec = spec or PropagationSpec()
    if t_final < initial.time:
        raise ValidationError(f"t_final={t_final} precedes the state time {initial.time}")
    couplings, default_step = _sdf_couplings(initial, drive, modes)
    tensor = _to_eigenbasis(initial.tensor(), 1, drive.phi_s)
    tensor, _ = _evolve(tensor, couplings, 1, initial.trunc.dim_per_mode, initial.time, t_final, spec, default_step)
    tensor = _from_eigenbasis(tensor, 1, drive.phi_s)
    _check_state(tensor, initial, spec.tol)
    return initial.with_tensor(tensor, t_final)


def spin_up_population(state: SimState) -> float:
    tensor = state.tensor()
    return float(np.sum(np.abs(tensor[1]) ** 2) / np.sum(np.abs(tensor) ** 2))


def sdf_spin_trace(initial: SimState, drive: SDFDrive, modes: Sequence[ModeParams], times,
                   spec: PropagationSpec = None) -> np.ndarray:
    """Spin-up population at each time from one sequential propagation."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValidationError("Sample times must be ascending")
    state = initial
    values = np.empty(len(times))
    for i, t in enumerate(times):
        state = propagate_sdf(state, drive, modes, float(t), spec)
        values[i] = spin_up_population(state)
    logger.info(f"Oracle spin trace: {len(times)} samples up to {times[-1] * 1e6:.1f} us")
    return values


def convergence_table(initial: SimState, drive: SDFDrive, modes: Sequence[ModeParams], t_final: float,
                      base_steps: int = 50, levels: int = 4) -> pd.DataFrame:
    """Spin-up population under repeated step halving; differences shrink ~4x per level."""
    couplings, _ = _sdf_couplings(initial, drive, modes)
    start = _to_eigenbasis(initial.tensor(), 1, drive.phi_s)
    rows = []
    previous = None
    for level in range(levels):
        n_steps = base_steps * 2 ** level
        tensor = _midpoint_evolve(start, couplings, 1, initial.trunc.dim_per_mode, initial.time, t_final, n_steps)
        tensor = _from_eigenbasis(tensor, 1, drive.phi_s)
        p_up = float(np.sum(np.abs(tensor[1]) ** 2))
        difference = abs(p_up - previous) if previous is not None else float('nan')
        rows.append({'n_steps': n_steps, 'step_us': (t_final - initial.time) / n_steps * 1e6,
                     'p_up': p_up, 'difference': difference})
        logger.debug(f"convergence: n_steps={n_steps:6d} p_up={p_up:.12f} diff={difference:.3e}")
        previous = p_up
    table = pd.DataFrame(rows)
    table['ratio'] = table['difference'].shift(1) / table['difference']
    return table


def _displacement_unitary_apply(tensor: np.ndarray, drive: SDFDrive, modes: Sequence[ModeParams],
                                state: SimState, t: float) -> np.ndarray:
    by_label = dict(zip('XY', split_modes(modes)))
    tensor = _to_eigenbasis(tensor, 1, drive.phi_s)
    for k, label in enumerate(state.mode_labels):
        # propagation displaces by the conjugate of the closed-form trajectory
        gamma = np.conj(trajectory(drive, by_label[label], t))
        for spin, sign in ((0, 1.0), (1, -1.0)):
            matrix = displacement_matrix(sign * gamma, state.trunc).entries
            tensor[spin] = _apply_on_axis(tensor[spin], matrix, k)
    return _from_eigenbasis(tensor, 1, drive.phi_s)


def herald_ecs(initial: SimState, drive: SDFDrive, modes: Sequence[ModeParams], t_sdf: float,
               spec: PropagationSpec = None, method: str = 'displacement') -> Tuple[FockVector, float]:
    """Project the spin onto |down> after the force; returns the motional state and its probability."""
    if method == 'displacement':
        if initial.time != 0:
            raise ValidationError("Displacement construction starts from t=0")
        if initial.n_spins != 1:
            raise ValidationError("Heralding acts on a single spin")
        tensor = _displacement_unitary_apply(initial.tensor(), drive, modes, initial, t_sdf)
    elif method == 'propagate':
        tensor = propagate_sdf(initial, drive, modes, t_sdf, spec).tensor()
    else:
        raise ValidationError(f"Unknown herald method {method!r}")

    motional = tensor[SPIN_INDEX['down']]
    probability = float(np.sum(np.abs(motional) ** 2))
    if probability < HERALD_FLOOR:
        raise DegenerateHeraldError(f"Herald probability {probability:.3e} is below {HERALD_FLOOR:.0e}",
                                    {'herald_probability': probability})
    vector = FockVector(motional / math.sqrt(probability), motional.shape)
    logger.debug(f"Herald at t={t_sdf * 1e6:.2f} us: probability {probability:.6f}")
    return vector, probability


def marginal_distribution(state, factor_index: int, label: str = 'Y') -> PhononDistribution:
    vector = state.vector if isinstance(state, SimState) else state
    populations = vector.factor_populations(factor_index) / vector.norm_squared()
    return PhononDistribution(populations, label)


def select_active_modes(mode_set: ChainModeSet, drive: MSDrive, max_active_modes: int = 2) -> Tuple[str, ...]:
    """Coupled modes nearest the drive, closest first."""
    coupled = [m for m in mode_set.modes if m.coupled]
    coupled.sort(key=lambda m: abs(drive.detuning(m)))
    chosen = coupled[:max_active_modes]
    dropped = [m.label for m in coupled[max_active_modes:]]
    if dropped:
        logger.info(f"MS oracle keeps {[m.label for m in chosen]}, drops {dropped}")
    return tuple(m.label for m in chosen)


def ms_ground_state(mode_set: ChainModeSet, drive: MSDrive, trunc: TruncationSpec,
                    max_active_modes: int = 2) -> SimState:
    labels = select_active_modes(mode_set, drive, max_active_modes)
    return ground_state(trunc, n_spins=2, mode_labels=labels)


def propagate_ms(initial: SimState, mode_set: ChainModeSet, drive: MSDrive, t_final: float,
                 spec: PropagationSpec = None, max_active_modes: int = 2, max_dim: int = 8) -> SimState:
    """Two spins, bichromatic drive, modes named by the state's mode labels."""
    spec = spec or PropagationSpec()
    if initial.n_spins != 2:
        raise ValidationError("The gate acts on two spins")
    budget = max_dim ** max_active_modes
    size = initial.trunc.dim_per_mode ** len(initial.mode_labels)
    if len(initial.mode_labels) > max_active_modes or size > budget:
        raise CapacityError(
            f"{len(initial.mode_labels)} modes at dim {initial.trunc.dim_per_mode} exceed the budget "
            f"({max_active_modes} modes, {budget} Fock states)",
            {'modes': list(initial.mode_labels), 'size': size, 'budget': budget},
        )

    couplings, rates = [], []
    for k, label in enumerate(initial.mode_labels):
        mode = mode_set.mode(label)
        if not mode.coupled:
            continue
        d = drive.detuning(mode)
        signs = {}
        for config in product(range(SPIN_DIM), repeat=2):
            s1, s2 = (1.0 if c == 0 else -1.0 for c in config)
            signs[config] = mode.eta_ion1 * s1 + mode.eta_ion2 * s2
        couplings.append(_Coupling(axis=2 + k, strength=drive.omega0 / 2, detuning=d, signs=signs))
        rates.extend([d, mode.eta * drive.omega0])

    tensor = _to_eigenbasis(initial.tensor(), 2, 0.0)
    tensor, _ = _evolve(tensor, couplings, 2, initial.trunc.dim_per_mode, initial.time, t_final, spec,
                        _default_step(rates))
    tensor = _from_eigenbasis(tensor, 2, 0.0)
    _check_state(tensor, initial, spec.tol)
    return initial.with_tensor(tensor, t_final)


def _spin_probabilities(tensor: np.ndarray) -> np.ndarray:
    probs = np.abs(tensor) ** 2
    return probs.sum(axis=tuple(range(2, probs.ndim)))


def ms_spin_populations(state: SimState) -> MSPopulations:
    probs = _spin_probabilities(state.tensor())
    probs = probs / probs.sum()
    return MSPopulations(float(probs[0, 0]), float(probs[0, 1] + probs[1, 0]), float(probs[1, 1]))


def analysis_pulse(phi: float) -> np.ndarray:
    """pi/2 rotation about cos(phi) x + sin(phi) y."""
    c = math.cos(math.pi / 4)
    s = math.sin(math.pi / 4)
    return np.array([[c, -1j * s * np.exp(-1j * phi)],
                     [-1j * s * np.exp(1j * phi), c]], dtype=complex)


def parity_scan(state: SimState, phases) -> pd.DataFrame:
    if state.n_spins != 2:
        raise ValidationError("Parity scan needs a two-spin state")
    base = state.tensor()
    rows = []
    for phi in np.asarray(phases, dtype=float):
        pulse = analysis_pulse(phi)
        tensor = _apply_on_axis(_apply_on_axis(base, pulse, 0), pulse, 1)
        probs = _spin_probabilities(tensor)
        probs = probs / probs.sum()
        mixed = probs[0, 1] + probs[1, 0]
        rows.append({'phi': phi, 'p_dd': probs[0, 0], 'p_du_plus_ud': mixed, 'p_uu': probs[1, 1],
                     'parity': probs[0, 0] + probs[1, 1] - mixed})
    return pd.DataFrame(rows)
