"""Truncated Fock-space numerics.

Number-state vectors, displacement-operator matrix elements, generalized
Laguerre polynomials and sideband Rabi frequencies. Everything here is a
pure function over immutable values.
"""

import math
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import DomainError, TruncationError, ValidationError

logger = logging.getLogger(__name__)

LAGUERRE_MAX_ORDER = 200


def default_dimension(magnitude: float) -> int:
    """Fock levels needed to hold a coherent state of the given |alpha|."""
    magnitude = abs(float(magnitude))
    return int(math.ceil(magnitude ** 2 + 6 * magnitude + 10))


@dataclass(frozen=True)
class TruncationSpec:
    dim_per_mode: int
    tail_tol: float = 1e-9

    def __post_init__(self):
        if int(self.dim_per_mode) != self.dim_per_mode or self.dim_per_mode < 2:
            raise ValidationError(f"dim_per_mode must be an integer >= 2, got {self.dim_per_mode}")
        if not 0 <= self.tail_tol < 1:
            raise ValidationError(f"tail_tol must lie in [0, 1), got {self.tail_tol}")
        object.__setattr__(self, 'dim_per_mode', int(self.dim_per_mode))

    @classmethod
    def for_amplitude(cls, magnitude: float, tail_tol: float = 1e-9, minimum: int = 2) -> 'TruncationSpec':
        return cls(max(default_dimension(magnitude), minimum), tail_tol)


def as_amplitude(value) -> complex:
    """Phase-space amplitudes are plain complex numbers with finite parts."""
    z = complex(value)
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise ValidationError(f"Amplitude must be finite, got {value}")
    return z


def _laguerre_series(n_max: int, k: int, x):
    """Rows L_0^k(x) .. L_{n_max}^k(x), three-term recurrence in n at fixed k."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = 1.0 + k - x
    for m in range(1, n_max):
        out[m + 1] = ((2 * m + 1 + k - x) * out[m] - (m + k) * out[m - 1]) / (m + 1)
    return out


def laguerre_assoc(n: int, k: int, x):
    """Generalized Laguerre polynomial L_n^k(x); x may be an array."""
    if n < 0 or k < 0:
        raise ValidationError(f"Laguerre order and index must be nonnegative, got n={n}, k={k}")
    if n > LAGUERRE_MAX_ORDER:
        raise DomainError(f"Laguerre order {n} exceeds {LAGUERRE_MAX_ORDER}", {'n': n, 'k': k})
    if not np.all(np.isfinite(x)):
        raise DomainError("Laguerre argument must be finite", {'n': n, 'k': k})

    with np.errstate(over='ignore', invalid='ignore'):
        value = _laguerre_series(n, k, x)[n]
    if not np.all(np.isfinite(value)):
        raise DomainError(f"L_{n}^{k} overflowed", {'n': n, 'k': k})
    return float(value) if np.ndim(value) == 0 else value


def sideband_rabi(n: int, omega0: float, eta: float) -> float:
    """Blue-sideband Rabi frequency between |n> and |n+1>."""
    if eta < 0 or omega0 < 0:
        raise ValidationError(f"eta and omega0 must be nonnegative, got eta={eta}, omega0={omega0}")
    if eta == 0:
        return 0.0
    eta2 = eta * eta
    return omega0 * math.exp(-eta2 / 2) * eta / math.sqrt(n + 1) * laguerre_assoc(n, 1, eta2)


def sideband_rabi_general(n: int, delta_n: int, omega0: float, eta: float) -> float:
    """Rabi frequency magnitude of the |n> -> |n + delta_n> transition (carrier, red or blue)."""
    if eta < 0 or omega0 < 0:
        raise ValidationError(f"eta and omega0 must be nonnegative, got eta={eta}, omega0={omega0}")
    target = n + delta_n
    if target < 0:
        return 0.0
    lower, k = min(n, target), abs(delta_n)
    eta2 = eta * eta
    log_ratio = 0.5 * (gammaln(lower + 1) - gammaln(lower + k + 1))
    return abs(omega0 * math.exp(-eta2 / 2 + log_ratio) * eta ** k * laguerre_assoc(lower, k, eta2))


def coherent_population(alpha_mag2, n):
    """Poisson weight e^{-|a|^2} |a|^{2n} / n!."""
    x = np.asarray(alpha_mag2, dtype=float)
    if np.any(x < 0):
        raise ValidationError(f"|alpha|^2 must be nonnegative, got {alpha_mag2}")
    value = np.exp(xlogy(n, x) - x - gammaln(np.asarray(n) + 1))
    return float(value) if np.ndim(value) == 0 else value


def coherent_amplitudes(alpha, dim: int) -> np.ndarray:
    alpha = as_amplitude(alpha)
    n = np.arange(dim)
    magnitude = np.exp(xlogy(n, abs(alpha)) - abs(alpha) ** 2 / 2 - 0.5 * gammaln(n + 1))
    return magnitude * np.exp(1j * n * np.angle(alpha))


def annihilation(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1).astype(complex)


@dataclass(frozen=True)
class DisplacementMatrix:
    entries: np.ndarray
    amplitude: complex
    truncation: TruncationSpec
    tail_mass: float = 0.0

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def element(self, m: int, n: int) -> complex:
        return complex(self.entries[m, n])

    def column(self, n: int) -> np.ndarray:
        return self.entries[:, n]


def displacement_matrix(alpha, trunc: TruncationSpec = None) -> DisplacementMatrix:
    """Number-state matrix <m|D(alpha)|n> of the displacement operator.

    The lower triangle uses the Laguerre closed form; the upper triangle
    follows from d_mn(alpha) = conj(d_nm(-alpha)).
    """
    alpha = as_amplitude(alpha)
    if trunc is None:
        trunc = TruncationSpec.for_amplitude(abs(alpha))
    dim = trunc.dim_per_mode
    mag, phase = abs(alpha), np.angle(alpha)
    x = mag * mag
    if x + 4 * mag + 4 > dim:
        logger.debug(f"dim={dim} is tight for |alpha|={mag:.3f}")

    log_fact = gammaln(np.arange(dim) + 1)
    envelope = math.exp(-x / 2)
    entries = np.zeros((dim, dim), dtype=complex)
    for k in range(dim):
        n = np.arange(dim - k)
        m = n + k
        with np.errstate(over='ignore', invalid='ignore'):
            lower = np.exp(0.5 * (log_fact[n] - log_fact[m])) * mag ** k * envelope * _laguerre_series(dim - 1 - k, k, x)
        if not np.all(np.isfinite(lower)):
            raise DomainError(f"Displacement elements overflowed for |alpha|={mag}", {'dim': dim})
        entries[m, n] = lower * np.exp(1j * k * phase)
        if k:
            entries[n, m] = (-1) ** k * lower * np.exp(-1j * k * phase)

    tail = max(0.0, 1.0 - float(np.sum(np.abs(entries[:, 0]) ** 2)))
    if tail > trunc.tail_tol:
        raise TruncationError(
            f"Displacement |alpha|={mag:.4f} leaks {tail:.3e} beyond dim={dim} (tol {trunc.tail_tol:.1e})",
            tail_mass=tail,
            details={'dim': dim, 'alpha_abs': mag},
        )
    entries.setflags(write=False)
    return DisplacementMatrix(entries=entries, amplitude=alpha, truncation=trunc, tail_mass=tail)


def displacement_element(alpha, m: int, n: int) -> complex:
    """Single entry <m|D(alpha)|n>, same closed form as displacement_matrix."""
    alpha = as_amplitude(alpha)
    if m < n:
        return (-1) ** (n - m) * displacement_element(alpha, n, m).conjugate()
    k = m - n
    mag, x = abs(alpha), abs(alpha) ** 2
    scale = math.exp(0.5 * (gammaln(n + 1) - gammaln(m + 1)) - x / 2) * mag ** k
    return scale * laguerre_assoc(n, k, x) * complex(math.cos(k * np.angle(alpha)), math.sin(k * np.angle(alpha)))


@dataclass(frozen=True)
class FockVector:
    """Amplitudes over a tensor product of factors, flattened in C order."""

    amplitudes: np.ndarray
    factor_dims: Tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.factor_dims)
        amps = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amps.size != int(np.prod(dims)):
            raise ValidationError(f"{amps.size} amplitudes do not fit factor dims {dims}")
        amps.setflags(write=False)
        object.__setattr__(self, 'amplitudes', amps)
        object.__setattr__(self, 'factor_dims', dims)

    @classmethod
    def basis(cls, factor_dims: Sequence[int], indices: Sequence[int]) -> 'FockVector':
        amps = np.zeros(tuple(factor_dims), dtype=complex)
        amps[tuple(indices)] = 1.0
        return cls(amps, tuple(factor_dims))

    @classmethod
    def product(cls, *factors) -> 'FockVector':
        amps = np.array([1.0 + 0j])
        for factor in factors:
            amps = np.kron(amps, np.asarray(factor, dtype=complex))
        return cls(amps, tuple(len(f) for f in factors))

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.factor_dims)

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalized(self) -> 'FockVector':
        norm = math.sqrt(self.norm_squared())
        if norm == 0:
            raise DomainError("Cannot normalize a zero vector")
        return FockVector(self.amplitudes / norm, self.factor_dims)

    def factor_populations(self, factor_index: int) -> np.ndarray:
        probs = np.abs(self.tensor()) ** 2
        axes = tuple(i for i in range(len(self.factor_dims)) if i != factor_index)
        return probs.sum(axis=axes)

    def top_level_mass(self, factor_index: int) -> float:
        return float(self.factor_populations(factor_index)[-1])
