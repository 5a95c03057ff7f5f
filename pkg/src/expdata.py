"""Synthetic experiments and the file formats that carry traces, schedules and fit reports."""

import io
import os
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from .errors import ConfigError, ValidationError
from .utils import atomic_write_text, s_to_us, us_to_s

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RNG_ALGORITHM = 'PCG64'
TRACE_COLUMNS = ['t_us', 'p_up', 'shots']
SCHEDULES_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data',
                              'published_schedules.json')


def make_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def to_plain(value: Any) -> Any:
    """Numpy scalars and arrays to builtin types so YAML can carry them."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, complex):
        return {'re': value.real, 'im': value.imag}
    return value


@dataclass
class RabiTrace:
    times: np.ndarray  # seconds
    p_up: np.ndarray
    shots: np.ndarray
    label: str = ''
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.p_up = np.asarray(self.p_up, dtype=float)
        shots = np.asarray(self.shots)
        if shots.ndim == 0:
            shots = np.full(self.times.shape, int(shots))
        self.shots = shots.astype(int)
        if not (len(self.times) == len(self.p_up) == len(self.shots)):
            raise ValidationError(
                f"Trace columns differ in length: {len(self.times)}, {len(self.p_up)}, {len(self.shots)}")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("Trace times must be strictly ascending")
        if np.any((self.p_up < 0) | (self.p_up > 1)):
            raise ValidationError("p_up must lie in [0, 1]")
        if np.any(self.shots <= 0):
            raise ValidationError("shots must be positive")

    def __len__(self):
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t_us': s_to_us(self.times), 'p_up': self.p_up, 'shots': self.shots})


@dataclass(frozen=True)
class NoiseModel:
    shots: int = 500
    eps_up: float = 0.03
    eps_down: float = 0.0
    seed: Optional[int] = None
    projection_noise: bool = True

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError(f"shots must be positive, got {self.shots}")
        for name in ('eps_up', 'eps_down'):
            if not 0 <= getattr(self, name) <= 0.2:
                raise ValidationError(f"{name} must lie in [0, 0.2], got {getattr(self, name)}")

    def distort(self, p):
        """Readout error: |up> is missed with eps_up, |down> reads bright with eps_down."""
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        return (1 - self.eps_up) * p + self.eps_down * (1 - p)


@dataclass
class Schedule:
    t_sdf_values: np.ndarray  # seconds, ascending
    order: np.ndarray
    seed: Optional[int] = None
    name: str = ''

    def __post_init__(self):
        self.t_sdf_values = np.asarray(self.t_sdf_values, dtype=float)
        self.order = np.asarray(self.order, dtype=int)
        if sorted(self.order.tolist()) != list(range(len(self.t_sdf_values))):
            raise ValidationError("Schedule order must be a permutation of the value indices")

    @property
    def sequence(self) -> np.ndarray:
        """Values in data-taking order."""
        return self.t_sdf_values[self.order]


def randomized_schedule(values, seed: Optional[int] = None) -> Schedule:
    values = np.sort(np.asarray(values, dtype=float))
    order = make_rng(seed).permutation(len(values)) if len(values) > 1 else np.arange(len(values))
    return Schedule(values, order, seed)


def published_schedule(name: str, path: str = SCHEDULES_PATH) -> Schedule:
    """Data-taking sequences shipped under data/, keyed 'R=-2/3' and 'R=-2'."""
    with open(path, 'r') as f:
        published = json.load(f)
    if name not in published['schedules']:
        raise ConfigError(f"Unknown published schedule {name!r}", {'available': sorted(published['schedules'])})
    sequence_us = np.asarray(published['schedules'][name], dtype=float)
    order = np.argsort(np.argsort(sequence_us))
    ascending = np.sort(sequence_us)
    return Schedule(us_to_s(ascending), order, None, name)


def synthesize_trace(model_curve: Callable, times, noise: NoiseModel, label: str = '',
                     metadata: Dict[str, Any] = None, rng: np.random.Generator = None) -> RabiTrace:
    """Binomial projection noise on top of the readout-distorted model curve."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly ascending")
    probability = noise.distort(model_curve(times))
    if noise.projection_noise:
        rng = rng or make_rng(noise.seed)
        p_up = rng.binomial(noise.shots, probability) / noise.shots
    else:
        p_up = probability
    info = {'rng': RNG_ALGORITHM, 'seed': noise.seed, 'shots': noise.shots,
            'eps_up': noise.eps_up, 'eps_down': noise.eps_down}
    info.update(metadata or {})
    return RabiTrace(times, p_up, np.full(times.shape, noise.shots), label, info)


def synthesize_ecs_dataset(schedule: Schedule, drive, modes, bsb_times, omega0: float, eta: float,
                           noise: NoiseModel, n_max: int = None, bsb_tau: float = float('inf')) -> List[RabiTrace]:
    """One blue-sideband trace per scheduled t_SDF, generated in data-taking order with spawned seeds."""
    from .dynamics import EcsState, ecs_distribution, parity, split_modes, trajectory
    from .estimation import bsb_model

    mode_x, mode_y = split_modes(modes)
    children = np.random.SeedSequence(noise.seed).spawn(len(schedule.t_sdf_values))
    traces = []
    for position, index in enumerate(schedule.order):
        t_sdf = float(schedule.t_sdf_values[index])
        state = EcsState(trajectory(drive, mode_x, t_sdf), trajectory(drive, mode_y, t_sdf), mode_x.p1, mode_y.p1)
        populations = ecs_distribution(state, n_max).populations
        def curve(t, populations=populations):
            return bsb_model(populations, omega0, bsb_tau, eta, t, amplitude_cap=1.0)

        t_sdf_us = float(np.round(s_to_us(t_sdf), 9))
        trace = synthesize_trace(
            curve, bsb_times, noise,
            label=f"tsdf_{t_sdf_us:g}us",
            metadata={'t_sdf_us': t_sdf_us, 'sequence_position': position + 1, 'axis': 'Y',
                      'child_seed_index': position},
            rng=np.random.Generator(np.random.PCG64(children[position])),
        )
        traces.append(trace)
        logger.debug(f"Synthesized trace {trace.label} (parity {parity(populations):.4f})")
    logger.info(f"📊 Synthesized {len(traces)} BSB traces, {noise.shots} shots per point")
    return traces


# ---------------------------------------------------------------------------
# Files

def write_trace(trace: RabiTrace, path: str):
    """CSV with the metadata as leading '# key: value' lines."""
    header = dict(to_plain(trace.metadata))
    header['label'] = trace.label
    header['schema_version'] = SCHEMA_VERSION
    lines = yaml.safe_dump(header, sort_keys=True, default_flow_style=False).splitlines()
    buffer = io.StringIO()
    buffer.write(''.join(f"# {line}\n" for line in lines))
    trace.to_frame().to_csv(buffer, index=False, lineterminator='\n')
    atomic_write_text(path, buffer.getvalue())
    logger.info(f"Wrote trace {trace.label!r} ({len(trace)} points) to {path}")


def read_trace(path: str) -> RabiTrace:
    try:
        with open(path, 'r') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read trace {path}: {e}", {'path': path})
    comment = [line[2:] if line.startswith('# ') else line[1:] for line in text.splitlines() if line.startswith('#')]
    header = yaml.safe_load('\n'.join(comment)) or {}
    frame = pd.read_csv(io.StringIO(text), comment='#')
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise ConfigError(f"Trace {path} lacks columns {missing}", {'path': path})
    header.pop('schema_version', None)
    label = str(header.pop('label', ''))
    return RabiTrace(us_to_s(frame['t_us'].to_numpy(float)), frame['p_up'].to_numpy(float),
                     frame['shots'].to_numpy(int), label, header)


def write_record(kind: str, payload: Dict[str, Any], path: str):
    record = {'schema_version': SCHEMA_VERSION, 'kind': kind}
    record.update(to_plain(payload))
    atomic_write_text(path, yaml.safe_dump(record, sort_keys=False, default_flow_style=False))
    logger.info(f"Wrote {kind} record to {path}")


def read_record(path: str, kind: str = None) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            record = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read record {path}: {e}", {'path': path})
    if record.get('schema_version') != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported schema_version {record.get('schema_version')!r} in {path}", {'path': path})
    if kind is not None and record.get('kind') != kind:
        raise ConfigError(f"Expected a {kind!r} record in {path}, found {record.get('kind')!r}", {'path': path})
    return record


def fit_report_to_record(report) -> Dict[str, Any]:
    record = to_plain(report.to_dict())
    # the record envelope owns "kind"
    record['fit_kind'] = record.pop('kind')
    return record


def fit_report_from_record(record: Dict[str, Any]):
    from .estimation import FitReport

    fields = {k: v for k, v in record.items() if k not in ('schema_version', 'kind')}
    fields['kind'] = fields.pop('fit_kind', 'bsb')
    return FitReport.from_dict(fields)


def schedule_to_record(schedule: Schedule) -> Dict[str, Any]:
    return {
        'name': schedule.name,
        't_sdf_us': [float(np.round(v, 9)) for v in s_to_us(schedule.t_sdf_values)],
        'order': schedule.order.tolist(),
        'seed': schedule.seed,
        'rng': RNG_ALGORITHM,
    }


def schedule_from_record(record: Dict[str, Any]) -> Schedule:
    return Schedule(us_to_s(np.asarray(record['t_sdf_us'], dtype=float)), record['order'], record.get('seed'),
                    record.get('name', ''))

