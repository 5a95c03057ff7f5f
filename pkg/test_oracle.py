import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.dynamics import EcsState, ModeParams, SDFDrive, ecs_distribution, split_modes, spin_up_probability, trajectory
from src.errors import CapacityError, DegenerateHeraldError, NumericalError, ValidationError
from src.estimation import fit_parity_scan
from src.fock_core import FockVector, TruncationSpec
from src.ms_gate import ChainModeSet, MSDrive, drive_for_ratio, ms_populations, required_rabi
from src.oracle import (
    PropagationSpec, SimState, convergence_table, ground_state, herald_ecs, marginal_distribution, ms_ground_state,
    ms_spin_populations, parity_scan, product_state, propagate_ms, propagate_sdf, sdf_spin_trace,
    select_active_modes, spin_up_population,
)
from src.utils import khz_to_angular

SPLITTING = float(khz_to_angular(27.8))
MODES = (ModeParams('X', 0.0, 0.05, p1=0.213), ModeParams('Y', SPLITTING, 0.11, p1=0.056))
TRUNC = TruncationSpec(32, 1e-9)
GATE_TIME = 182e-6


@pytest.fixture(scope="module")
def drive():
    return SDFDrive.from_ratio(float(khz_to_angular(212.6)), -2 / 3, SPLITTING)


@pytest.fixture(scope="module")
def chain_modes():
    modes = ChainModeSet.from_trap(float(khz_to_angular(1250.0)), float(khz_to_angular(27.8)),
                                   float(khz_to_angular(120.0)), 0.05, 0.11)
    return modes.restricted(['X_cm', 'Y_tilt'])


@pytest.fixture(scope="module")
def bell_state(chain_modes):
    center = drive_for_ratio(chain_modes, -1 / 3)
    ms_drive = MSDrive(required_rabi(chain_modes, GATE_TIME, center_detuning=center), center, GATE_TIME)
    state = ms_ground_state(chain_modes, ms_drive, TruncationSpec(8, 1e-6))
    return propagate_ms(state, chain_modes, ms_drive, GATE_TIME), ms_drive


def test_ground_state_layout():
    state = ground_state(TRUNC)
    assert state.vector.factor_dims == (2, 32, 32)
    assert spin_up_population(state) == 0.0
    with pytest.raises(ValidationError):
        product_state(['down'], [0], TRUNC)


def test_sim_state_rejects_mismatched_dims():
    vector = FockVector.basis((2, 4, 4), (0, 0, 0))
    with pytest.raises(ValidationError):
        SimState(vector, 0.0, TruncationSpec(5))
    with pytest.raises(NumericalError):
        SimState(FockVector(2 * vector.amplitudes, (2, 4, 4)), 0.0, TruncationSpec(4))


def test_propagation_spec_validation():
    with pytest.raises(ValidationError):
        PropagationSpec(step=0.0)
    with pytest.raises(ValueError):
        PropagationSpec(scheme='euler')


def test_spin_trace_matches_closed_form(drive):
    times = np.linspace(0.0, 200e-6, 41)
    oracle = sdf_spin_trace(ground_state(TRUNC), drive, MODES, times)
    assert np.max(np.abs(oracle - spin_up_probability(drive, MODES, times))) < 1e-4


def test_spin_trace_rejects_descending_times(drive):
    with pytest.raises(ValidationError):
        sdf_spin_trace(ground_state(TRUNC), drive, MODES, [2e-6, 1e-6])


def test_adaptive_scheme_matches_midpoint(drive):
    t_final = 20e-6
    fixed = propagate_sdf(ground_state(TRUNC), drive, MODES, t_final)
    adaptive = propagate_sdf(ground_state(TRUNC), drive, MODES, t_final,
                             PropagationSpec(scheme='step-halving-adaptive', tol=1e-6))
    assert spin_up_population(adaptive) == pytest.approx(spin_up_population(fixed), abs=1e-4)
    assert spin_up_population(adaptive) == pytest.approx(spin_up_probability(drive, MODES, t_final), abs=1e-5)


def test_step_halving_is_second_order(drive):
    table = convergence_table(ground_state(TRUNC), drive, MODES, 30e-6, base_steps=50, levels=4)
    assert list(table['n_steps']) == [50, 100, 200, 400]
    assert 3.0 < table['ratio'].iloc[-1] < 5.0


@pytest.mark.parametrize("weights", [(0.0, 0.0), (0.213, 0.056)])
def test_herald_marginal_matches_closed_form(drive, weights):
    p_x1, p_y1 = weights
    t_sdf = math.pi / abs(drive.delta_y)
    mode_x, mode_y = split_modes(MODES)
    state = EcsState(trajectory(drive, mode_x, t_sdf), trajectory(drive, mode_y, t_sdf), p_x1, p_y1)
    closed = ecs_distribution(state, TRUNC.dim_per_mode - 1).populations

    cases = {(1, 0): p_x1 * (1 - p_y1), (0, 1): (1 - p_x1) * p_y1, (0, 0): (1 - p_x1) * (1 - p_y1)}
    total = sum(cases.values())
    mixture = np.zeros(TRUNC.dim_per_mode)
    for indices, weight in cases.items():
        if weight == 0:
            continue
        vector, probability = herald_ecs(product_state(['down'], list(indices), TRUNC), drive, MODES, t_sdf)
        assert 0 < probability <= 1
        mixture += weight / total * marginal_distribution(vector, 1).populations
    assert np.max(np.abs(mixture - closed)) < 1e-8


def test_herald_methods_agree(drive):
    t_sdf = 25e-6
    initial = ground_state(TRUNC)
    exact, p_exact = herald_ecs(initial, drive, MODES, t_sdf)
    stepped, p_stepped = herald_ecs(initial, drive, MODES, t_sdf, method='propagate')
    assert p_stepped == pytest.approx(p_exact, abs=1e-3)
    assert_allclose(marginal_distribution(stepped, 1).populations, marginal_distribution(exact, 1).populations,
                    atol=1e-3)
    with pytest.raises(ValidationError):
        herald_ecs(initial, drive, MODES, t_sdf, method='guess')


def test_degenerate_herald_raises(drive):
    with pytest.raises(DegenerateHeraldError) as info:
        herald_ecs(product_state(['up'], [0, 0], TRUNC), drive, MODES, 0.0)
    assert info.value.exit_code == 3


def test_select_active_modes_prefers_nearest():
    modes = ChainModeSet.from_trap(float(khz_to_angular(1250.0)), float(khz_to_angular(27.8)),
                                   float(khz_to_angular(120.0)), 0.05, 0.11)
    center = drive_for_ratio(modes, -1 / 3)
    ms_drive = MSDrive(1e5, center, GATE_TIME)
    assert select_active_modes(modes, ms_drive) == ('X_cm', 'X_tilt')
    assert select_active_modes(modes, ms_drive, max_active_modes=1) == ('X_cm',)


def test_ms_capacity_limit(chain_modes):
    state = ground_state(TruncationSpec(8), n_spins=2, mode_labels=('X_cm', 'Y_tilt', 'X_tilt'))
    ms_drive = MSDrive(1e5, drive_for_ratio(chain_modes, -1 / 3), GATE_TIME)
    with pytest.raises(CapacityError):
        propagate_ms(state, chain_modes, ms_drive, 1e-6)


def test_ms_oracle_reaches_bell_populations(bell_state, chain_modes):
    state, ms_drive = bell_state
    populations = ms_spin_populations(state)
    assert_allclose(populations.as_tuple(), (0.5, 0.0, 0.5), atol=2e-3)
    closed = ms_populations(chain_modes, ms_drive, ms_drive.gate_time)
    assert_allclose(populations.as_tuple(), closed.as_tuple(), atol=2e-3)


def test_parity_scan_of_product_state_is_flat():
    state = ground_state(TruncationSpec(4), n_spins=2, mode_labels=('X_cm',))
    scan = parity_scan(state, np.linspace(0.0, math.pi, 9))
    assert_allclose(scan['parity'], 0.0, atol=1e-12)
    assert_allclose(scan['p_dd'] + scan['p_du_plus_ud'] + scan['p_uu'], 1.0)


def test_parity_scan_of_bell_state_oscillates(bell_state):
    state, _ = bell_state
    phases = np.linspace(0.0, math.pi, 25)
    scan = parity_scan(state, phases)
    report = fit_parity_scan(phases, scan['parity'].to_numpy())
    assert report.parameters['amplitude'] == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValidationError):
        parity_scan(ground_state(TRUNC), phases)


@pytest.mark.parametrize("spin", ['down', 'up'])
def test_zero_rabi_frequency_leaves_state_unchanged(spin):
    still = SDFDrive(0.0, float(khz_to_angular(11.12)), float(khz_to_angular(-16.68)))
    initial = product_state([spin], [1, 2], TruncationSpec(8))
    later = propagate_sdf(initial, still, MODES, 50e-6)
    assert later.time == 50e-6
    assert_allclose(later.tensor(), initial.tensor(), atol=1e-14)


def test_single_mode_loop_returns_to_initial_state(drive):
    modes = (ModeParams('X', 0.0, 0.0), ModeParams('Y', SPLITTING, 0.11))
    period = 2 * math.pi / abs(drive.delta_y)
    initial = ground_state(TruncationSpec(24, 1e-9))
    final = propagate_sdf(initial, drive, modes, period, PropagationSpec(step=period / 4000))
    assert abs(np.vdot(initial.tensor(), final.tensor())) ** 2 > 1 - 1e-6
    assert spin_up_population(final) < 1e-6


def test_norm_holds_over_ten_thousand_steps(drive):
    t_final = 40e-6
    final = propagate_sdf(ground_state(TruncationSpec(24, 1e-9)), drive, MODES, t_final,
                          PropagationSpec(step=t_final / 10_000))
    assert abs(final.vector.norm_squared() - 1) < 1e-10


@pytest.mark.parametrize("t_sdf", [0.0, 12.5e-6, 25e-6, 60e-6])
def test_herald_probability_is_cat_overlap(drive, t_sdf):
    mode_x, mode_y = split_modes(MODES)
    a2 = abs(trajectory(drive, mode_x, t_sdf)) ** 2
    b2 = abs(trajectory(drive, mode_y, t_sdf)) ** 2
    _, probability = herald_ecs(ground_state(TRUNC), drive, MODES, t_sdf)
    assert probability == pytest.approx(0.5 * (1 + math.exp(-2 * (a2 + b2))), abs=1e-10)


def test_herald_without_force_is_certain(drive):
    vector, probability = herald_ecs(ground_state(TRUNC), drive, MODES, 0.0)
    assert probability == pytest.approx(1.0, abs=1e-12)
    assert marginal_distribution(vector, 1).populations[0] == pytest.approx(1.0)
    assert marginal_distribution(vector, 0).populations[0] == pytest.approx(1.0)


def test_ms_propagation_at_zero_time(chain_modes):
    ms_drive = MSDrive(1e5, drive_for_ratio(chain_modes, -1 / 3), GATE_TIME)
    state = ms_ground_state(chain_modes, ms_drive, TruncationSpec(8, 1e-6))
    same = propagate_ms(state, chain_modes, ms_drive, 0.0)
    assert ms_spin_populations(same).as_tuple() == pytest.approx((1.0, 0.0, 0.0))
    assert_allclose(same.tensor(), state.tensor(), atol=1e-14)
