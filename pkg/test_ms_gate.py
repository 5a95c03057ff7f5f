import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from src.errors import InfeasibleConfigurationError, UnsupportedConfigurationError, ValidationError, ZeroDetuningError
from src.ms_gate import (
    BELL_PHASE, ChainMode, ChainModeSet, MSDrive, bell_fidelity, contribution_breakdown, drive_for_ratio,
    geometric_phase, ideal_parity_curve, loop_closure_time, mode_displacement, ms_populations, phase_slope,
    optimize_gate_time, population_arrays, required_rabi,
)
from src.utils import angular_to_khz, khz_to_angular

GATE_TIME = 182e-6


def trap_modes(nbar=None):
    return ChainModeSet.from_trap(float(khz_to_angular(1250.0)), float(khz_to_angular(27.8)),
                                  float(khz_to_angular(120.0)), 0.05, 0.11, nbar)


def gate_drive(mode_set, gate_time=GATE_TIME, ratio=-1 / 3):
    center = drive_for_ratio(mode_set, ratio)
    return MSDrive(required_rabi(mode_set, gate_time, center_detuning=center), center, gate_time)


def test_mode_frequencies_from_trap():
    modes = trap_modes()
    khz = {m.label: float(angular_to_khz(m.frequency)) for m in modes.modes}
    assert khz['X_cm'] == pytest.approx(1250.0)
    assert khz['Y_cm'] == pytest.approx(1277.8)
    assert khz['X_tilt'] == pytest.approx(1244.226, abs=1e-3)
    assert khz['Y_tilt'] == pytest.approx(1272.153, abs=1e-3)
    for mode in modes.modes:
        assert abs(mode.eta_ion1) == pytest.approx((0.05 if mode.axis == 'X' else 0.11) / math.sqrt(2))


def test_chain_mode_sign_rules():
    with pytest.raises(ValidationError):
        ChainMode('X_cm', 1.0, 0.03, -0.03)
    with pytest.raises(ValidationError):
        ChainMode('X_tilt', 1.0, 0.03, 0.03)
    with pytest.raises(ValidationError):
        ChainMode('Y_cm', 1.0, 0.03, 0.02)
    with pytest.raises(ValidationError):
        ChainMode('Z_cm', 1.0, 0.03, 0.03)


def test_mode_set_rejects_wrong_tilt_frequency():
    modes = trap_modes()
    bad = tuple(m if m.label != 'X_tilt' else ChainMode('X_tilt', m.frequency * 1.01, m.eta_ion1, m.eta_ion2)
                for m in modes.modes)
    with pytest.raises(ValidationError):
        ChainModeSet(bad, modes.axial_frequency)


def test_restricted_switches_modes_off():
    modes = trap_modes().restricted(['X_cm'])
    assert [m.label for m in modes.modes if m.coupled] == ['X_cm']
    assert len(modes.modes) == 4
    with pytest.raises(ValidationError):
        trap_modes().restricted(['X_axial'])


def test_drive_for_ratio_position():
    modes = trap_modes()
    center = drive_for_ratio(modes, -1 / 3)
    assert float(angular_to_khz(center)) == pytest.approx(1255.538, abs=1e-3)
    d_cm = center - modes.mode('X_cm').frequency
    d_tilt = center - modes.mode('Y_tilt').frequency
    assert d_cm / d_tilt == pytest.approx(-1 / 3)
    with pytest.raises(UnsupportedConfigurationError):
        drive_for_ratio(modes, 0.5)


def test_populations_start_in_ground_state():
    drive = gate_drive(trap_modes())
    assert ms_populations(trap_modes(), drive, 0.0).as_tuple() == (1.0, 0.0, 0.0)


def test_single_mode_gate_reaches_bell_state():
    modes = trap_modes().restricted(['X_cm'])
    d = float(khz_to_angular(10.0))
    center = modes.mode('X_cm').frequency + d
    gate_time = 2 * math.pi / d
    assert loop_closure_time(modes, center) == pytest.approx(gate_time)
    omega0 = required_rabi(modes, gate_time, center_detuning=center)
    drive = MSDrive(omega0, center, gate_time)
    assert abs(mode_displacement(modes.mode('X_cm'), drive, gate_time)) < 1e-10
    expected = (0.05 / math.sqrt(2)) ** 2 * omega0 ** 2 * 2 * math.pi / (4 * d * d)
    assert geometric_phase(modes, drive, gate_time) == pytest.approx(expected)
    assert geometric_phase(modes, drive, gate_time) == pytest.approx(BELL_PHASE)
    assert_allclose(ms_populations(modes, drive, gate_time).as_tuple(), (0.5, 0.0, 0.5), atol=1e-10)


def test_required_rabi_for_four_modes():
    modes = trap_modes()
    drive = gate_drive(modes)
    assert float(angular_to_khz(drive.omega0)) == pytest.approx(86.1, rel=0.10)
    assert geometric_phase(modes, drive, GATE_TIME) == pytest.approx(BELL_PHASE)


def test_two_axes_lower_the_required_rabi():
    modes = trap_modes()
    center = drive_for_ratio(modes, -1 / 3)
    both = required_rabi(modes, GATE_TIME, center_detuning=center)
    x_only = required_rabi(modes.without_axis('Y'), GATE_TIME, center_detuning=center)
    y_only = required_rabi(modes.without_axis('X'), GATE_TIME, center_detuning=center)
    # eta_x != eta_y makes the axes unequal, so each ratio misses 1/sqrt(2) by a few percent
    target = 1 / math.sqrt(2)
    assert both / x_only == pytest.approx(target, rel=0.10)
    assert both / y_only == pytest.approx(target, rel=0.10)
    assert math.sqrt(both / x_only * both / y_only) == pytest.approx(target, rel=0.05)


def test_four_mode_gate_residual_comes_from_open_spectator_loops():
    modes = trap_modes()
    drive = gate_drive(modes)
    populations = ms_populations(modes, drive, GATE_TIME)
    open_loops = sum(abs(mode_displacement(m, drive, GATE_TIME)) ** 2 for m in modes.modes)
    # p_mixed = sum |alpha_n|^2 to first order at nbar = 0
    assert populations.p_du_plus_ud == pytest.approx(open_loops, rel=0.02)
    assert 0.008 < populations.p_du_plus_ud < 0.012
    assert populations.p_dd == pytest.approx(populations.p_uu, abs=1e-9)
    assert populations.p_dd == pytest.approx(0.5, abs=0.006)
    assert populations.bell_residual == pytest.approx(populations.p_du_plus_ud)


def test_dominant_modes_reach_bell_populations_at_gate_time():
    modes = trap_modes().restricted(['X_cm', 'Y_tilt'])
    populations = ms_populations(modes, gate_drive(modes), GATE_TIME)
    assert populations.bell_residual < 2e-3


def test_optimized_gate_time_shrinks_the_residual():
    modes = trap_modes()
    center = drive_for_ratio(modes, -1 / 3)
    nominal = ms_populations(modes, gate_drive(modes), GATE_TIME).bell_residual
    drive = optimize_gate_time(modes, center, GATE_TIME)
    assert 178e-6 < drive.gate_time < GATE_TIME
    assert drive.center_detuning == center
    assert geometric_phase(modes, drive, drive.gate_time) == pytest.approx(BELL_PHASE)
    best = ms_populations(modes, drive, drive.gate_time).bell_residual
    assert best < 2.5e-3
    assert best < 0.3 * nominal
    with pytest.raises(ValidationError):
        optimize_gate_time(modes, center, GATE_TIME, window=0.0)


def test_contribution_shares():
    modes = trap_modes()
    breakdown = contribution_breakdown(modes, gate_drive(modes), GATE_TIME)
    assert sum(breakdown.shares.values()) == pytest.approx(1.0)
    assert sum(breakdown.magnitude_shares.values()) == pytest.approx(1.0)
    assert breakdown.axis_share('X') + breakdown.axis_share('Y') == pytest.approx(1.0)
    assert breakdown.axis_share('X') == pytest.approx(0.5, abs=0.125)
    assert breakdown.contributions['X_cm'] > 0
    assert breakdown.contributions['X_tilt'] < 0


def test_required_rabi_infeasible_when_phase_negative():
    modes = trap_modes().restricted(['X_tilt'])
    center = drive_for_ratio(trap_modes(), -1 / 3)
    with pytest.raises(InfeasibleConfigurationError):
        required_rabi(modes, GATE_TIME, center_detuning=center)
    with pytest.raises(ValidationError):
        required_rabi(modes, GATE_TIME, target_phase=0.0, center_detuning=center)


def test_resonant_drive_raises():
    modes = trap_modes()
    drive = MSDrive(1e5, modes.mode('Y_cm').frequency, GATE_TIME)
    with pytest.raises(ZeroDetuningError):
        geometric_phase(modes, drive, GATE_TIME)


def test_phase_slope_matches_long_time_growth():
    modes = trap_modes().restricted(['X_cm'])
    drive = MSDrive(1e5, modes.mode('X_cm').frequency + float(khz_to_angular(10.0)), GATE_TIME)
    period = loop_closure_time(modes, drive.center_detuning)
    growth = (geometric_phase(modes, drive, 3 * period) - geometric_phase(modes, drive, 2 * period)) / period
    assert growth == pytest.approx(phase_slope(modes, drive))


def test_bell_fidelity():
    assert bell_fidelity(0.942, 0.852) == pytest.approx(0.897, abs=1e-12)
    with pytest.raises(ValidationError):
        bell_fidelity(1.2, 0.5)


def test_ideal_parity_curve():
    assert ideal_parity_curve(0.0) == pytest.approx(-1.0)
    assert_allclose(ideal_parity_curve([math.pi / 2, math.pi / 4]), [1.0, 0.0], atol=1e-12)


@given(st.floats(10.0, 150.0), st.floats(0.0, 400.0), st.floats(0.0, 0.5))
def test_populations_are_probabilities(omega_khz, t_us, nbar):
    modes = trap_modes({label: nbar for label in ('X_cm', 'Y_tilt')})
    drive = MSDrive(float(khz_to_angular(omega_khz)), drive_for_ratio(modes, -1 / 3), GATE_TIME)
    p_dd, p_mixed, p_uu, _ = population_arrays(modes, drive, t_us * 1e-6)
    values = np.array([p_dd, p_mixed, p_uu])
    assert np.all(values >= -1e-12)
    assert np.all(values <= 1 + 1e-12)
    assert values.sum() == pytest.approx(1.0)


@given(st.floats(10.0, 150.0), st.floats(0.0, 400.0))
def test_zero_coupling_leaves_spins_untouched(omega_khz, t_us):
    drive = MSDrive(float(khz_to_angular(omega_khz)), drive_for_ratio(trap_modes(), -1 / 3), GATE_TIME)
    t = t_us * 1e-6
    off = trap_modes().scaled_eta(0.0)
    assert ms_populations(off, drive, t).as_tuple() == (1.0, 0.0, 0.0)
    assert geometric_phase(off, drive, t) == 0.0
    weak = trap_modes().scaled_eta(1e-6)
    assert_allclose(ms_populations(weak, drive, t).as_tuple(), (1.0, 0.0, 0.0), atol=1e-9)
    assert abs(geometric_phase(weak, drive, t)) < 1e-9
