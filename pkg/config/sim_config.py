import os
import math
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from src.dynamics import ModeParams, SDFDrive, detunings_from_ratio
from src.errors import ConfigError
from src.estimation import BsbFitConfig, ParityFitConfig
from src.expdata import NoiseModel
from src.ms_gate import ChainModeSet, MSDrive, drive_for_ratio, optimize_gate_time, required_rabi
from src.utils import khz_to_angular, us_to_s

logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
PRESETS_PATH = os.path.join(CONFIG_DIR, 'presets.yaml')
RECORD_KEYS = ('schema_version', 'kind')
HERALD_METHODS = ('displacement', 'propagate')


@dataclass
class RuntimeSettings:
    log_level: str = field(default_factory=lambda: os.getenv('LOG_LEVEL', 'INFO'))
    output_dir: str = field(default_factory=lambda: os.getenv('ECS_OUTPUT_DIR', 'output'))
    default_seed: Optional[int] = field(
        default_factory=lambda: int(os.getenv('ECS_DEFAULT_SEED')) if os.getenv('ECS_DEFAULT_SEED') else None)


def load_presets(path: str = PRESETS_PATH) -> Dict[str, Dict[str, Any]]:
    try:
        with open(path, 'r') as f:
            return yaml.safe_load(f).get('presets', {})
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot load presets from {path}: {e}", {'path': path})


def get_preset(name: str) -> Dict[str, Any]:
    presets = load_presets()
    if name not in presets:
        raise ConfigError(f"Unknown preset {name!r}", {'available': sorted(presets)})
    return dict(presets[name])


def parse_ratio(value) -> float:
    """Ratios may be written as fractions ('-2/3') in files and on the command line."""
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"Cannot parse detuning ratio {value!r}")


@dataclass
class RunConfig:
    """Every setting a command can read, in file units (kHz, us)."""

    preset: Optional[str] = None
    seed: Optional[int] = None
    out: Optional[str] = None
    input: Optional[str] = None
    format: str = 'csv'

    # single-ion drive and modes
    ratio: float = -2 / 3
    splitting_khz: float = 27.8
    omega_khz: float = 212.6
    eta_x: float = 0.05
    eta_y: float = 0.11
    nbar_x: float = 0.0
    nbar_y: float = 0.0
    p_x1: float = 0.0
    p_y1: float = 0.0
    phi_s: float = 0.0
    phi_m: float = 0.0
    tau_us: Optional[float] = None
    t_max_us: float = 200.0
    n_points: int = 401
    tsdf_us: Optional[float] = None

    # heralded states
    alpha_abs: Optional[float] = None
    beta_abs: Optional[float] = None
    nmax: Optional[int] = None
    weighting: str = 'prior'
    herald_method: str = 'displacement'

    # synthetic data
    shots: int = 500
    eps_up: float = 0.03
    eps_down: float = 0.0
    projection_noise: bool = True
    bsb_omega0_khz: float = 45.0
    bsb_eta: float = 0.11
    bsb_t_max_us: float = 500.0
    bsb_n_points: int = 201
    schedule: Optional[str] = None
    tsdf_values_us: Optional[List[float]] = None

    # fits
    fit_nmax: int = 8
    amplitude_cap: float = 0.97
    omega0_policy: str = 'explicit'
    initial_distribution: str = 'even-cat'
    fit_tau: bool = True
    max_iterations: int = 200
    free_parameters: List[str] = field(default_factory=lambda: ['omega', 'p_x1', 'p_y1'])
    truth: Optional[Dict[str, Any]] = None

    # two-ion gate
    ms_cm_x_khz: float = 1250.0
    ms_splitting_khz: float = 27.8
    ms_axial_khz: float = 120.0
    ms_eta_x: float = 0.05
    ms_eta_y: float = 0.11
    ms_nbar: float = 0.0
    ms_ratio: float = -1 / 3
    ms_gate_time_us: float = 182.0
    ms_optimize_gate_time: bool = False
    ms_omega0_khz: Optional[float] = None
    ms_modes: Optional[List[str]] = None
    scan_points: int = 41

    # oracle
    oracle_dim: int = 32

    def __post_init__(self):
        self.ratio = parse_ratio(self.ratio)
        self.ms_ratio = parse_ratio(self.ms_ratio)
        if self.format not in ('csv', 'structured'):
            raise ConfigError(f"format must be 'csv' or 'structured', got {self.format!r}")
        if self.herald_method not in HERALD_METHODS:
            raise ConfigError(f"herald_method must be one of {HERALD_METHODS}, got {self.herald_method!r}")
        if self.n_points < 2 or self.bsb_n_points < 2:
            raise ConfigError("Time grids need at least two points")
        if self.t_max_us <= 0 or self.bsb_t_max_us <= 0:
            raise ConfigError("Time grids must extend beyond zero")
        if self.seed is not None and not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, values: Dict[str, Any], source: str = 'config') -> 'RunConfig':
        values = {k: v for k, v in values.items() if k not in RECORD_KEYS}
        unknown = sorted(set(values) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"Unknown keys in {source}: {unknown}", {'unknown': unknown})
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Bad value in {source}: {e}")

    @classmethod
    def from_sources(cls, config_path: str = None, overrides: Dict[str, Any] = None) -> 'RunConfig':
        """Defaults, then preset, then file values, then flags; later sources win."""
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        file_values = {}
        if config_path:
            try:
                with open(config_path, 'r') as f:
                    file_values = yaml.safe_load(f) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"Cannot read config {config_path}: {e}", {'path': config_path})
            if not isinstance(file_values, dict):
                raise ConfigError(f"Config {config_path} must be a mapping", {'path': config_path})
            file_values = {k: v for k, v in file_values.items() if k not in RECORD_KEYS}
            unknown = sorted(set(file_values) - set(cls.field_names()))
            if unknown:
                raise ConfigError(f"Unknown keys in {config_path}: {unknown}", {'unknown': unknown})

        preset_name = overrides.get('preset') or file_values.get('preset')
        merged = get_preset(preset_name) if preset_name else {}
        merged.update(file_values)
        merged.update(overrides)
        if preset_name:
            merged['preset'] = preset_name
        config = cls.from_dict(merged, source=config_path or 'flags')
        logger.debug(f"Run config: {config.to_record()}")
        return config

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        for key in ('input', 'out'):
            record.pop(key)
        return record

    # -- internal units -------------------------------------------------

    def sdf_drive(self) -> SDFDrive:
        delta_x, delta_y = detunings_from_ratio(self.ratio, float(khz_to_angular(self.splitting_khz)))
        tau = math.inf if self.tau_us is None else float(us_to_s(self.tau_us))
        return SDFDrive(omega=float(khz_to_angular(self.omega_khz)), delta_x=delta_x, delta_y=delta_y,
                        phi_s=self.phi_s, phi_m=self.phi_m, tau=tau)

    def sdf_modes(self):
        # mode frequencies are offsets from the X mode; only the splitting enters the dynamics
        x_offset = 0.0
        y_offset = float(khz_to_angular(self.splitting_khz))
        return (ModeParams('X', x_offset, self.eta_x, self.nbar_x, self.p_x1),
                ModeParams('Y', y_offset, self.eta_y, self.nbar_y, self.p_y1))

    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, float(us_to_s(self.t_max_us)), self.n_points)

    def bsb_times(self) -> np.ndarray:
        return np.linspace(0.0, float(us_to_s(self.bsb_t_max_us)), self.bsb_n_points)

    def tsdf(self) -> float:
        """SDF duration in seconds; defaults to the time of the largest Y displacement."""
        if self.tsdf_us is not None:
            return float(us_to_s(self.tsdf_us))
        return math.pi / abs(self.sdf_drive().delta_y)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(shots=self.shots, eps_up=self.eps_up, eps_down=self.eps_down, seed=self.seed,
                          projection_noise=self.projection_noise)

    def bsb_fit_config(self) -> BsbFitConfig:
        return BsbFitConfig(
            n_max=self.fit_nmax,
            amplitude_cap=self.amplitude_cap,
            omega0_guess_policy=self.omega0_policy,
            omega0_guess=float(khz_to_angular(self.bsb_omega0_khz)),
            initial_distribution=self.initial_distribution,
            eta=self.bsb_eta,
            fit_tau=self.fit_tau,
            max_iterations=self.max_iterations,
        )

    def parity_fit_config(self) -> ParityFitConfig:
        return ParityFitConfig.from_ratio(
            self.ratio, float(khz_to_angular(self.splitting_khz)),
            free_parameters=tuple(self.free_parameters),
            omega=float(khz_to_angular(self.omega_khz)),
            p_x1=self.p_x1,
            p_y1=self.p_y1,
            eta_x=self.eta_x,
            eta_y=self.eta_y,
            weighting=self.weighting,
            max_iterations=self.max_iterations,
        )

    def chain_modes(self) -> ChainModeSet:
        nbar = {label: self.ms_nbar for label in ('X_tilt', 'X_cm', 'Y_tilt', 'Y_cm')}
        mode_set = ChainModeSet.from_trap(
            float(khz_to_angular(self.ms_cm_x_khz)), float(khz_to_angular(self.ms_splitting_khz)),
            float(khz_to_angular(self.ms_axial_khz)), self.ms_eta_x, self.ms_eta_y, nbar)
        return mode_set.restricted(self.ms_modes) if self.ms_modes else mode_set

    def ms_drive(self, mode_set: ChainModeSet = None) -> MSDrive:
        mode_set = mode_set or self.chain_modes()
        center = drive_for_ratio(mode_set, self.ms_ratio)
        gate_time = float(us_to_s(self.ms_gate_time_us))
        if self.ms_omega0_khz is None and self.ms_optimize_gate_time:
            return optimize_gate_time(mode_set, center, gate_time)
        if self.ms_omega0_khz is None:
            omega0 = required_rabi(mode_set, gate_time, center_detuning=center)
        else:
            omega0 = float(khz_to_angular(self.ms_omega0_khz))
        return MSDrive(omega0, center, gate_time)
