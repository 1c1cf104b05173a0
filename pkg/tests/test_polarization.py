import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ogsim import polarization as pol
from ogsim.errors import ContractError, LowConfidenceError, PreconditionError

from oracles import grid_search_compensation, haar_unitary, infidelity, rotation


def assert_equal_up_to_phase(a, b, atol=1e-10):
    a = np.asarray(a, complex).ravel()
    b = np.asarray(b, complex).ravel()
    k = int(np.argmax(np.abs(b)))
    phase = a[k] / b[k]
    assert abs(abs(phase) - 1) < 1e-9
    assert np.allclose(a, phase * b, atol=atol)


# -- waveplates -------------------------------------------------------------

def test_half_wave_at_22p5_maps_h_to_d():
    out = pol.waveplate("half", 22.5) @ pol.H_STATE
    assert_equal_up_to_phase(out, pol.D_STATE)


def test_quarter_wave_at_45_makes_circular():
    out = pol.waveplate("quarter", 45.0) @ pol.H_STATE
    assert abs(out[0]) == pytest.approx(abs(out[1]), abs=1e-12)
    rel = cmath.phase(out[1] / out[0])
    assert abs(abs(rel) - math.pi / 2) < 1e-12


def test_half_wave_aligned_leaves_h():
    out = pol.waveplate("half", 0.0) @ pol.H_STATE
    assert_equal_up_to_phase(out, pol.H_STATE)


@given(st.floats(0, 180))
def test_waveplates_unitary_and_qwp_squares_to_hwp(theta):
    q = pol.waveplate("quarter", theta)
    h = pol.waveplate("half", theta)
    assert pol.is_unitary(q) and pol.is_unitary(h)
    assert np.allclose(q @ q, h, atol=1e-10)


# -- chains -----------------------------------------------------------------

def test_apply_chain_empty_is_identity():
    out = pol.apply_chain([], pol.D_STATE)
    assert np.allclose(out, pol.D_STATE)


def test_apply_chain_inverse_pair_restores():
    u = pol.waveplate("quarter", 33.0) @ pol.waveplate("half", 71.0)
    out = pol.apply_chain([u, u.conj().T], pol.linear_state(28.0))
    assert_equal_up_to_phase(out, pol.linear_state(28.0))


def test_double_half_wave_is_identity_by_matrix_product():
    w = pol.waveplate("half", 22.5)
    explicit = w @ w  # oracle: explicit matrix product
    assert_equal_up_to_phase(explicit.ravel(), np.eye(2, dtype=complex).ravel())
    out = pol.apply_chain([w, w], pol.H_STATE)
    assert_equal_up_to_phase(out, pol.H_STATE)


def test_apply_chain_rejects_non_unitary():
    with pytest.raises(ContractError):
        pol.apply_chain([np.array([[1, 0], [0, 0.5]], complex)], pol.H_STATE)


@given(st.floats(0, 180), st.floats(0, 180), st.floats(-89, 89))
def test_chain_preserves_norm(a, b, psi):
    out = pol.apply_chain(
        [pol.waveplate("quarter", a), pol.waveplate("half", b)], pol.linear_state(psi)
    )
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-10)


# -- azimuth ----------------------------------------------------------------

def test_azimuth_of_cardinal_states():
    assert pol.polarization_azimuth(pol.H_STATE) == pytest.approx(0.0, abs=1e-12)
    assert pol.polarization_azimuth(pol.D_STATE) == pytest.approx(45.0, abs=1e-12)


def test_azimuth_of_rotated_h():
    state = rotation(17.0) @ pol.H_STATE
    assert pol.polarization_azimuth(state) == pytest.approx(17.0, abs=1e-9)


def test_azimuth_rejects_near_circular():
    circ = pol.jones_vector(1.0, 1.0j)
    with pytest.raises(LowConfidenceError):
        pol.polarization_azimuth(circ)


@given(st.floats(-80, 80), st.floats(-85, 85))
def test_azimuth_shifts_with_physical_rotation(psi, alpha):
    base = pol.linear_state(psi)
    rotated = rotation(alpha) @ base
    got = pol.polarization_azimuth(rotated)
    expected = (psi + alpha + 90.0) % 180.0 - 90.0
    diff = abs(got - expected) % 180.0
    assert min(diff, 180.0 - diff) < 1e-9


def test_right_circular_stokes_v_positive():
    s = pol.jones_to_stokes(pol.jones_vector(1.0, 1.0j))
    assert s.v == pytest.approx(1.0, abs=1e-12)


# -- compensation solver ------------------------------------------------------

def test_identity_channel_canonical_solution():
    ws = pol.solve_compensation(np.eye(2, dtype=complex))
    assert ws.as_tuple() == (0.0, 0.0, 0.0)
    assert pol.residual_infidelity(np.eye(2, dtype=complex), ws) < 1e-12


def test_rotation_channel_compensated():
    channel = rotation(30.0)
    ws = pol.solve_compensation(channel)
    composite = ws.composite() @ channel  # explicit matrix product oracle
    assert_equal_up_to_phase(composite.ravel(), np.eye(2, dtype=complex).ravel())
    assert pol.residual_infidelity(channel, ws) < 1e-6


def test_solver_on_haar_random_unitaries():
    rng = np.random.default_rng(123)
    for _ in range(100):
        u = haar_unitary(rng)
        ws = pol.solve_compensation(u)
        assert pol.residual_infidelity(u, ws) < 1e-6


def test_solver_deterministic():
    rng = np.random.default_rng(7)
    u = haar_unitary(rng)
    assert pol.solve_compensation(u) == pol.solve_compensation(u)


def test_solver_agrees_with_grid_oracle_spot_check():
    rng = np.random.default_rng(2024)
    for _ in range(2):
        u = haar_unitary(rng)
        ws = pol.solve_compensation(u)
        _sol, oracle_fid = grid_search_compensation(u, step_deg=2.0)
        assert pol.residual_infidelity(u, ws) < 1e-6
        assert oracle_fid < 1e-6


def test_solve_near_prefers_small_plate_travel():
    near = pol.WaveplateSet(0.0, 0.0, 0.0)
    ws = pol.solve_compensation(rotation(2.0), near=near)
    travel = sum(
        min(abs(a - b) % 180, 180 - abs(a - b) % 180)
        for a, b in zip(ws.as_tuple(), near.as_tuple())
    )
    assert travel < 10.0
    assert pol.residual_infidelity(rotation(2.0), ws) < 1e-6


def test_solver_rejects_non_unitary():
    with pytest.raises(ContractError):
        pol.solve_compensation(np.array([[1, 0], [0, 0.5]], complex))


# -- residual infidelity -------------------------------------------------------

def test_infidelity_perfect_compensation_zero():
    ws = pol.solve_compensation(rotation(30.0))
    assert pol.residual_infidelity(rotation(30.0), ws) < 1e-12


def test_infidelity_of_uncompensating_stack():
    # stack equal to R(45) composed with channel R(45): trace R(90) = 0 by hand
    ws = pol.solve_compensation(rotation(-45.0))  # composite == R(45) up to phase
    assert pol.residual_infidelity(rotation(45.0), ws) == pytest.approx(1.0, abs=1e-9)


def test_infidelity_invariant_under_global_phase():
    rng = np.random.default_rng(5)
    u = haar_unitary(rng)
    ws = pol.WaveplateSet(10.0, 20.0, 30.0)
    a = pol.residual_infidelity(u, ws)
    b = pol.residual_infidelity(np.exp(1j * 0.7) * u, ws)
    assert a == pytest.approx(b, abs=1e-12)


# -- closed loop ----------------------------------------------------------------

def test_closed_loop_no_error_no_change():
    current = pol.WaveplateSet(12.0, 34.0, 56.0)
    assert pol.closed_loop_step(5.0, 5.0, current, 0.5) is current


def test_closed_loop_converges_geometrically():
    channel = rotation(10.0)
    plates = pol.WaveplateSet(0.0, 0.0, 0.0)
    gain = 0.5
    for _ in range(20):
        probe = pol.apply_chain([channel, plates.composite()], pol.H_STATE)
        measured = pol.polarization_azimuth(probe)
        plates = pol.closed_loop_step(measured, 0.0, plates, gain)
    probe = pol.apply_chain([channel, plates.composite()], pol.H_STATE)
    assert abs(pol.polarization_azimuth(probe)) < 0.01


def test_closed_loop_full_gain_single_step():
    channel = rotation(7.0)
    plates = pol.WaveplateSet(0.0, 0.0, 0.0)
    probe = pol.apply_chain([channel, plates.composite()], pol.H_STATE)
    plates = pol.closed_loop_step(pol.polarization_azimuth(probe), 0.0, plates, 1.0)
    probe = pol.apply_chain([channel, plates.composite()], pol.H_STATE)
    assert abs(pol.polarization_azimuth(probe)) < 1e-6


def test_closed_loop_gain_validation():
    with pytest.raises(PreconditionError):
        pol.closed_loop_step(1.0, 0.0, pol.WaveplateSet(0, 0, 0), 0.0)


# -- qber ------------------------------------------------------------------------

def test_qber_from_misalignment():
    assert pol.qber_from_misalignment(0.0) == 0.0
    assert pol.qber_from_misalignment(45.0) == pytest.approx(0.5, abs=1e-12)
    assert pol.qber_from_misalignment(10.0) == pytest.approx(0.0302, abs=1e-4)


# -- structural property -----------------------------------------------------------

@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_solver_property_haar(seed):
    u = haar_unitary(np.random.default_rng(seed))
    ws = pol.solve_compensation(u)
    assert pol.residual_infidelity(u, ws) < 1e-6
    # cross-check with the independent infidelity implementation
    assert infidelity(u, *ws.as_tuple()) < 1e-6
