"""Two-ion Molmer-Sorensen observables with both transverse axes.

Population formulas with thermal factors, the geometric phase, per-mode
contributions and the calibration helpers used to pick a drive position
and Rabi frequency.
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InfeasibleConfigurationError, UnsupportedConfigurationError, ValidationError, ZeroDetuningError

logger = logging.getLogger(__name__)

MS_MODE_LABELS = ('X_tilt', 'X_cm', 'Y_tilt', 'Y_cm')
BELL_PHASE = math.pi / 8
BELL_POPULATIONS = (0.5, 0.0, 0.5)


@dataclass(frozen=True)
class ChainMode:
    label: str
    frequency: float
    eta_ion1: float
    eta_ion2: float
    nbar: float = 0.0

    def __post_init__(self):
        if self.label not in MS_MODE_LABELS:
            raise ValidationError(f"Chain mode label must be one of {MS_MODE_LABELS}, got {self.label!r}")
        if not math.isclose(abs(self.eta_ion1), abs(self.eta_ion2), rel_tol=1e-12, abs_tol=1e-15):
            raise ValidationError(f"{self.label}: both ions must couple with equal strength")
        product = self.eta_ion1 * self.eta_ion2
        if self.is_cm and product < 0:
            raise ValidationError(f"{self.label}: center-of-mass mode needs equal signs")
        if not self.is_cm and product > 0:
            raise ValidationError(f"{self.label}: tilt mode needs opposite signs")
        if self.nbar < 0:
            raise ValidationError(f"{self.label}: nbar must be nonnegative")

    @property
    def axis(self) -> str:
        return self.label[0]

    @property
    def is_cm(self) -> bool:
        return self.label.endswith('_cm')

    @property
    def eta(self) -> float:
        return math.hypot(self.eta_ion1, self.eta_ion2)

    @property
    def coupled(self) -> bool:
        return self.eta_ion1 != 0 or self.eta_ion2 != 0


@dataclass(frozen=True)
class ChainModeSet:
    modes: Tuple[ChainMode, ...]
    axial_frequency: float

    def __post_init__(self):
        modes = tuple(self.modes)
        labels = [m.label for m in modes]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"Duplicate chain mode labels: {labels}")
        object.__setattr__(self, 'modes', modes)
        by_label = {m.label: m for m in modes}
        for axis in 'XY':
            cm, tilt = by_label.get(f'{axis}_cm'), by_label.get(f'{axis}_tilt')
            if cm and tilt:
                expected = math.sqrt(max(cm.frequency ** 2 - self.axial_frequency ** 2, 0.0))
                if not math.isclose(tilt.frequency, expected, rel_tol=1e-9):
                    raise ValidationError(
                        f"{axis}_tilt frequency {tilt.frequency:.6g} != sqrt(cm^2 - axial^2) = {expected:.6g}"
                    )

    @classmethod
    def from_trap(cls, cm_x: float, splitting: float, axial: float, eta_x: float, eta_y: float,
                  nbar: Dict[str, float] = None) -> 'ChainModeSet':
        """Four transverse modes; per-ion factors are +-eta_axis/sqrt(2)."""
        nbar = nbar or {}
        cm_y = cm_x + splitting
        modes = []
        for axis, cm, eta in (('X', cm_x, eta_x), ('Y', cm_y, eta_y)):
            if cm <= axial:
                raise ValidationError(f"{axis} center-of-mass frequency must exceed the axial frequency")
            per_ion = eta / math.sqrt(2)
            tilt = math.sqrt(cm ** 2 - axial ** 2)
            modes.append(ChainMode(f'{axis}_tilt', tilt, per_ion, -per_ion, nbar.get(f'{axis}_tilt', 0.0)))
            modes.append(ChainMode(f'{axis}_cm', cm, per_ion, per_ion, nbar.get(f'{axis}_cm', 0.0)))
        return cls(tuple(modes), axial)

    def mode(self, label: str) -> ChainMode:
        for m in self.modes:
            if m.label == label:
                return m
        raise ValidationError(f"No chain mode {label!r} in this set")

    def restricted(self, labels: Iterable[str]) -> 'ChainModeSet':
        """Copy in which only the named modes stay coupled."""
        keep = set(labels)
        unknown = keep - {m.label for m in self.modes}
        if unknown:
            raise ValidationError(f"Unknown chain modes {sorted(unknown)}")
        modes = tuple(m if m.label in keep else replace(m, eta_ion1=0.0, eta_ion2=0.0) for m in self.modes)
        return replace(self, modes=modes)

    def without_axis(self, axis: str) -> 'ChainModeSet':
        return self.restricted(m.label for m in self.modes if m.axis != axis)

    def scaled_eta(self, factor: float) -> 'ChainModeSet':
        modes = tuple(replace(m, eta_ion1=m.eta_ion1 * factor, eta_ion2=m.eta_ion2 * factor) for m in self.modes)
        return replace(self, modes=modes)


@dataclass(frozen=True)
class MSDrive:
    omega0: float
    center_detuning: float
    gate_time: float

    def __post_init__(self):
        if not self.omega0 > 0:
            raise ValidationError(f"omega0 must be positive, got {self.omega0}")
        if not self.gate_time > 0:
            raise ValidationError(f"gate_time must be positive, got {self.gate_time}")

    def detuning(self, mode: ChainMode) -> float:
        return self.center_detuning - mode.frequency


@dataclass(frozen=True)
class MSPopulations:
    p_dd: float
    p_du_plus_ud: float
    p_uu: float

    def __post_init__(self):
        values = (self.p_dd, self.p_du_plus_ud, self.p_uu)
        if any(v < -1e-12 or v > 1 + 1e-12 for v in values):
            raise ValidationError(f"Populations out of range: {values}")
        if abs(sum(values) - 1) > 1e-9:
            raise ValidationError(f"Populations sum to {sum(values):.12f}")

    @property
    def even_population(self) -> float:
        return self.p_dd + self.p_uu

    @property
    def parity(self) -> float:
        return self.p_dd + self.p_uu - self.p_du_plus_ud

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.p_dd, self.p_du_plus_ud, self.p_uu)

    @property
    def bell_residual(self) -> float:
        """Largest deviation from (1/2, 0, 1/2)."""
        return max(abs(p - ideal) for p, ideal in zip(self.as_tuple(), BELL_POPULATIONS))


def _mode_detuning(mode: ChainMode, drive: MSDrive) -> float:
    d = drive.detuning(mode)
    if d == 0:
        raise ZeroDetuningError(f"Drive sits on the {mode.label} sideband; resonant loops are not modeled",
                                {'mode': mode.label})
    return d


def mode_displacement(mode: ChainMode, drive: MSDrive, t):
    t = np.asarray(t, dtype=float)
    if not mode.coupled:
        value = np.zeros(t.shape, dtype=complex)
    else:
        d = _mode_detuning(mode, drive)
        value = mode.eta * drive.omega0 / (2 * d) * (1 - np.exp(-1j * d * t))
    return complex(value) if value.ndim == 0 else value


def _phase_terms(mode_set: ChainModeSet, drive: MSDrive, t) -> Dict[str, np.ndarray]:
    t = np.asarray(t, dtype=float)
    terms = {}
    for mode in mode_set.modes:
        product = mode.eta_ion1 * mode.eta_ion2
        if product == 0:
            terms[mode.label] = np.zeros(t.shape)
            continue
        d = _mode_detuning(mode, drive)
        terms[mode.label] = product * drive.omega0 ** 2 * (d * t - np.sin(d * t)) / (4 * d * d)
    return terms


def geometric_phase(mode_set: ChainModeSet, drive: MSDrive, t):
    value = sum(_phase_terms(mode_set, drive, t).values())
    return float(value) if np.ndim(value) == 0 else value


def phase_slope(mode_set: ChainModeSet, drive: MSDrive) -> float:
    """Asymptotic dPhi/dt."""
    return sum(
        m.eta_ion1 * m.eta_ion2 * drive.omega0 ** 2 / (4 * _mode_detuning(m, drive))
        for m in mode_set.modes if m.eta_ion1 * m.eta_ion2 != 0
    )


def population_arrays(mode_set: ChainModeSet, drive: MSDrive, t):
    """(p_dd, p_du_plus_ud, p_uu, phi) as arrays over t."""
    t = np.asarray(t, dtype=float)
    tilt = np.zeros(t.shape)
    cm = np.zeros(t.shape)
    for mode in mode_set.modes:
        weight = (mode.nbar + 0.5) * np.abs(mode_displacement(mode, drive, t)) ** 2
        if mode.is_cm:
            cm = cm + weight
        else:
            tilt = tilt + weight
    e_tilt, e_cm, e_cross = np.exp(-8 * tilt), np.exp(-8 * cm), np.exp(-2 * (tilt + cm))
    phi = geometric_phase(mode_set, drive, t)
    interference = 4 * np.cos(4 * phi) * e_cross
    p_dd = (2 + e_tilt + e_cm + interference) / 8
    p_uu = (2 + e_tilt + e_cm - interference) / 8
    p_mixed = 2 * (2 - e_tilt - e_cm) / 8
    return p_dd, p_mixed, p_uu, phi


def ms_populations(mode_set: ChainModeSet, drive: MSDrive, t: float) -> MSPopulations:
    p_dd, p_mixed, p_uu, _ = population_arrays(mode_set, drive, float(t))
    return MSPopulations(float(p_dd), float(p_mixed), float(p_uu))


@dataclass(frozen=True)
class PhaseBreakdown:
    """Per-mode geometric-phase contributions at one time.

    shares are signed and sum to 1; magnitude_shares use sum |Phi_n|.
    """

    contributions: Dict[str, float]
    shares: Dict[str, float]
    magnitude_shares: Dict[str, float]
    convention: str = 'signed'

    def axis_share(self, axis: str) -> float:
        return sum(v for k, v in self.shares.items() if k.startswith(axis))


def contribution_breakdown(mode_set: ChainModeSet, drive: MSDrive, t: float) -> PhaseBreakdown:
    contributions = {k: float(v) for k, v in _phase_terms(mode_set, drive, float(t)).items()}
    total = sum(contributions.values())
    magnitude = sum(abs(v) for v in contributions.values())
    if total == 0 or magnitude == 0:
        raise InfeasibleConfigurationError("Geometric phase vanishes; contributions cannot be normalized")
    return PhaseBreakdown(
        contributions=contributions,
        shares={k: v / total for k, v in contributions.items()},
        magnitude_shares={k: abs(v) / magnitude for k, v in contributions.items()},
    )


def bell_fidelity(even_population: float, parity_amplitude: float) -> float:
    for name, value in (('even_population', even_population), ('parity_amplitude', parity_amplitude)):
        if not 0 <= value <= 1:
            raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return (even_population + parity_amplitude) / 2


def required_rabi(mode_set: ChainModeSet, gate_time: float, target_phase: float = BELL_PHASE,
                  center_detuning: float = None) -> float:
    """Omega0 giving the target geometric phase at the gate time.

    Phi is proportional to Omega0^2, so the root of Phi(Omega0) = target is
    read off from the phase at unit Rabi frequency.
    """
    if not target_phase > 0:
        raise ValidationError(f"target_phase must be positive, got {target_phase}")
    if center_detuning is None:
        raise ValidationError("center_detuning is required to place the drive")
    unit = geometric_phase(mode_set, MSDrive(1.0, center_detuning, gate_time), gate_time)
    if not unit > 0 or not math.isfinite(unit):
        raise InfeasibleConfigurationError(
            f"Mode contributions sum to {unit:.3e}; no Rabi frequency reaches phase {target_phase:.4f}",
            {'unit_phase': unit},
        )
    omega0 = math.sqrt(target_phase / unit)
    logger.debug(f"required_rabi: Phi(1 rad/s)={unit:.4e}, Omega0={omega0:.6e} rad/s")
    return omega0


def drive_for_ratio(mode_set: ChainModeSet, ratio: float) -> float:
    """Drive position with delta(X_cm) / delta(Y_tilt) = R."""
    if ratio >= 0:
        raise UnsupportedConfigurationError(f"Two-ion ratio R={ratio} must be negative", {'ratio': ratio})
    x_cm = mode_set.mode('X_cm').frequency
    y_tilt = mode_set.mode('Y_tilt').frequency
    return (x_cm - ratio * y_tilt) / (1 - ratio)


def loop_closure_time(mode_set: ChainModeSet, center_detuning: float, label: str = 'X_cm', loops: int = 1) -> float:
    d = center_detuning - mode_set.mode(label).frequency
    if d == 0:
        raise ZeroDetuningError(f"Drive sits on the {label} sideband")
    return 2 * math.pi * loops / abs(d)


def optimize_gate_time(mode_set: ChainModeSet, center_detuning: float, gate_time: float, window: float = 5e-6,
                       target_phase: float = BELL_PHASE) -> MSDrive:
    """Gate time within +-window of the nominal one that lands closest to the Bell populations.

    Omega0 is recalibrated to the target phase at every candidate, so only
    the spin-motion residual of the loops that stay open is minimized.
    """
    if not 0 < window < gate_time:
        raise ValidationError(f"window must lie in (0, gate_time), got {window}")

    def drive_at(t: float) -> MSDrive:
        return MSDrive(required_rabi(mode_set, t, target_phase, center_detuning), center_detuning, t)

    def residual(t: float) -> float:
        return ms_populations(mode_set, drive_at(t), t).bell_residual

    result = minimize_scalar(residual, bounds=(gate_time - window, gate_time + window), method='bounded',
                             options={'xatol': 1e-10})
    drive = drive_at(float(result.x))
    logger.info(f"Gate time {drive.gate_time * 1e6:.3f} us (nominal {gate_time * 1e6:.3f} us): "
                f"Bell residual {residual(gate_time):.2e} -> {float(result.fun):.2e}")
    return drive


def ideal_parity_curve(phi, phi0: float = 0.0):
    return -np.cos(2 * np.asarray(phi, dtype=float) + phi0)
