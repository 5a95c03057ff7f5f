import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.dynamics import ModeParams, SDFDrive
from src.errors import ConfigError, ValidationError
from src.estimation import FitReport
from src.expdata import (
    NoiseModel, RabiTrace, Schedule, fit_report_from_record, fit_report_to_record, published_schedule,
    randomized_schedule, read_record, read_trace, schedule_from_record, schedule_to_record, synthesize_ecs_dataset,
    synthesize_trace, to_plain, write_record, write_trace,
)
from src.utils import khz_to_angular

SPLITTING = float(khz_to_angular(27.8))
MODES = (ModeParams('X', 0.0, 0.05), ModeParams('Y', SPLITTING, 0.11))


def constant(value):
    return lambda t: np.full(np.shape(t), value)


def test_rabi_trace_validation():
    trace = RabiTrace([0.0, 1e-6], [0.0, 0.5], 100)
    assert_array_equal(trace.shots, [100, 100])
    assert len(trace) == 2
    with pytest.raises(ValidationError):
        RabiTrace([0.0, 1e-6], [0.0], 100)
    with pytest.raises(ValidationError):
        RabiTrace([1e-6, 0.0], [0.0, 0.5], 100)
    with pytest.raises(ValidationError):
        RabiTrace([0.0, 1e-6], [0.0, 1.5], 100)
    with pytest.raises(ValidationError):
        RabiTrace([0.0, 1e-6], [0.0, 0.5], 0)


def test_noise_model_validation():
    with pytest.raises(ValidationError):
        NoiseModel(eps_up=0.3)
    with pytest.raises(ValidationError):
        NoiseModel(shots=0)
    assert_allclose(NoiseModel(eps_up=0.03, eps_down=0.01).distort([0.0, 1.0]), [0.01, 0.97])


def test_readout_error_without_projection_noise():
    noise = NoiseModel(shots=500, eps_up=0.03, projection_noise=False)
    trace = synthesize_trace(constant(1.0), np.linspace(0.0, 1e-4, 11), noise)
    assert_allclose(trace.p_up, 0.97)


def test_binomial_noise_is_unbiased():
    p = 0.3
    noise = NoiseModel(shots=500, eps_up=0.0, seed=17)
    times = np.arange(100_000) * 1e-6
    trace = synthesize_trace(constant(p), times, noise)
    sigma_of_mean = math.sqrt(p * (1 - p) / 500 / len(times))
    assert abs(trace.p_up.mean() - p) < 3 * sigma_of_mean
    assert_allclose(trace.p_up * 500, np.round(trace.p_up * 500), atol=1e-9)


def test_synthesis_is_deterministic_for_a_seed():
    times = np.linspace(0.0, 1e-4, 51)
    noise = NoiseModel(shots=100, seed=42)
    first = synthesize_trace(constant(0.4), times, noise)
    second = synthesize_trace(constant(0.4), times, noise)
    assert_array_equal(first.p_up, second.p_up)
    assert first.metadata['rng'] == 'PCG64'
    assert first.metadata['seed'] == 42
    other = synthesize_trace(constant(0.4), times, NoiseModel(shots=100, seed=43))
    assert not np.array_equal(first.p_up, other.p_up)


def test_published_schedules():
    schedule = published_schedule('R=-2/3')
    assert len(schedule.t_sdf_values) == 23
    assert schedule.sequence[0] == pytest.approx(110e-6)
    assert np.all(np.diff(schedule.t_sdf_values) > 0)
    other = published_schedule('R=-2')
    assert len(other.t_sdf_values) == 19
    assert_allclose(other.sequence[-2:], [180e-6, 140e-6])
    with pytest.raises(ConfigError):
        published_schedule('R=-1')


def test_randomized_schedule():
    values = [30e-6, 0.0, 10e-6, 20e-6]
    first = randomized_schedule(values, seed=5)
    assert_allclose(first.t_sdf_values, sorted(values))
    assert sorted(first.sequence) == sorted(values)
    assert_array_equal(first.order, randomized_schedule(values, seed=5).order)
    with pytest.raises(ValidationError):
        Schedule([0.0, 1e-6], [0, 0])


def test_ecs_dataset_follows_schedule_order():
    drive = SDFDrive.from_ratio(float(khz_to_angular(212.6)), -2 / 3, SPLITTING)
    schedule = randomized_schedule([0.0, 10e-6, 20e-6, 30e-6], seed=9)
    noise = NoiseModel(shots=200, seed=9)
    times = np.linspace(0.0, 300e-6, 61)
    traces = synthesize_ecs_dataset(schedule, drive, MODES, times, float(khz_to_angular(45.0)), 0.11, noise)
    assert [t.metadata['t_sdf_us'] for t in traces] == pytest.approx(list(schedule.sequence * 1e6))
    assert [t.metadata['sequence_position'] for t in traces] == [1, 2, 3, 4]
    assert traces[0].label == f"tsdf_{schedule.sequence[0] * 1e6:g}us"
    again = synthesize_ecs_dataset(schedule, drive, MODES, times, float(khz_to_angular(45.0)), 0.11, noise)
    for a, b in zip(traces, again):
        assert_array_equal(a.p_up, b.p_up)


def test_trace_file_round_trip(tmp_path):
    trace = synthesize_trace(constant(0.25), np.linspace(0.0, 2e-4, 21), NoiseModel(shots=300, seed=1),
                             label='probe', metadata={'t_sdf_us': 30.0, 'axis': 'Y'})
    path = tmp_path / 'traces' / 'probe.csv'
    write_trace(trace, str(path))
    text = path.read_text()
    assert text.startswith('# ')
    assert 'schema_version: 1' in text
    restored = read_trace(str(path))
    assert restored.label == 'probe'
    assert_allclose(restored.times, trace.times, rtol=1e-12)
    assert_array_equal(restored.p_up, trace.p_up)
    assert restored.metadata['t_sdf_us'] == 30.0
    assert restored.metadata['seed'] == 1


def test_read_trace_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_trace(str(tmp_path / 'missing.csv'))
    bad = tmp_path / 'bad.csv'
    bad.write_text("t_us,value\n0,0.1\n")
    with pytest.raises(ConfigError):
        read_trace(str(bad))


def test_record_kind_and_version_checks(tmp_path):
    path = tmp_path / 'record.yaml'
    write_record('table', {'values': np.arange(3)}, str(path))
    assert read_record(str(path), kind='table')['values'] == [0, 1, 2]
    with pytest.raises(ConfigError):
        read_record(str(path), kind='schedule')
    path.write_text("schema_version: 99\nkind: table\n")
    with pytest.raises(ConfigError):
        read_record(str(path))


def test_fit_report_record_round_trip(tmp_path):
    report = FitReport(
        parameters={'p_0': 0.9, 'p_1': 0.1, 'omega0': 2.8e5, 'tau': math.inf},
        standard_errors={'p_0': 0.01, 'p_1': 0.01, 'omega0': 1e2, 'tau': 0.0},
        covariance=np.diag([1e-4, 1e-4, 1e4]),
        parameter_names=['p_0', 'p_1', 'omega0'],
        residual_norm=1.5,
        iterations=12,
        converged=True,
        flags=['omega0-drift'],
        kind='bsb',
    )
    path = tmp_path / 'report.yaml'
    write_record('fit-report', fit_report_to_record(report), str(path))
    restored = fit_report_from_record(read_record(str(path), kind='fit-report'))
    assert restored.kind == 'bsb'
    assert restored.parameters == report.parameters
    assert restored.flags == ['omega0-drift']
    assert_allclose(restored.covariance, report.covariance)


def test_schedule_record_round_trip(tmp_path):
    schedule = published_schedule('R=-2')
    path = tmp_path / 'schedule.yaml'
    write_record('schedule', schedule_to_record(schedule), str(path))
    restored = schedule_from_record(read_record(str(path), kind='schedule'))
    assert restored.name == 'R=-2'
    assert_allclose(restored.sequence, schedule.sequence)


def test_to_plain():
    plain = to_plain({'a': np.float64(1.5), 'b': np.arange(2), 'c': np.bool_(True), 'd': 1 + 2j})
    assert plain == {'a': 1.5, 'b': [0, 1], 'c': True, 'd': {'re': 1.0, 'im': 2.0}}
    assert type(plain['b'][0]) is int
