import math

import numpy as np
import pytest

from eabc.dynamics import ANGLE_LIMIT, RobotParams, f_sys
from eabc.equilibrium import (
    C_O,
    EquilibriumSolverError,
    InfeasibleEquilibriumError,
    Reference,
    solve_equilibrium_newton,
    solve_equilibrium_optimization,
    track_stand_equilibrium,
)

P = RobotParams()
DELTAS = np.linspace(-0.6, 0.6, 5)
D_PHIS = np.linspace(-1.0, 1.0, 5)


def test_upright_at_zero():
    eq = track_stand_equilibrium(Reference(0.0, 0.0), np.zeros(2), P)
    np.testing.assert_array_equal(eq.x_e, np.zeros(5))
    np.testing.assert_array_equal(eq.u_e, np.zeros(2))
    assert eq.feasible


def test_track_stand_roll_value():
    eq = track_stand_equilibrium(Reference(0.0, 0.3), np.zeros(2), P)
    by_hand = math.asin(0.140 * 0.024 / 0.408 * math.cos(math.radians(25)) * 0.3 / 0.2)
    assert eq.phi_e == pytest.approx(by_hand, abs=1e-12)
    assert eq.phi_e == pytest.approx(0.011196, abs=1e-6)
    assert np.max(np.abs(f_sys(eq.x_e, eq.u_e, np.zeros(2), P))) < 1e-12


@pytest.mark.parametrize("delta_ref", DELTAS)
@pytest.mark.parametrize("d_phi", D_PHIS)
def test_grid_residual_and_newton(delta_ref, d_phi):
    d = np.array([0.07, d_phi])
    ref = Reference(0.2, delta_ref)
    eq = track_stand_equilibrium(ref, d, P)
    assert eq.residual < 1e-10 and eq.feasible
    np.testing.assert_array_equal(C_O @ eq.x_e, ref.y)
    assert eq.x_e[1] == 0 and eq.x_e[4] == 0
    nw = solve_equilibrium_newton(ref, d, P)
    np.testing.assert_allclose(nw.x_e, eq.x_e, atol=1e-8)
    np.testing.assert_allclose(nw.u_e, eq.u_e, atol=1e-8)
    opt = solve_equilibrium_optimization(ref, d, P)
    assert opt.feasible
    np.testing.assert_allclose(opt.x_e, nw.x_e, atol=1e-6)


def test_newton_warm_start_one_iteration():
    ref, d = Reference(0.0, 0.3), np.array([0.1, 0.3])
    eq = track_stand_equilibrium(ref, d, P)
    x0 = eq.x_e + np.array([0, 0, 0, 1e-7, 0])
    nw = solve_equilibrium_newton(ref, d, P, x0=x0, u0=eq.u_e)
    assert nw.iterations == 1


def test_infeasible_closed_form():
    with pytest.raises(InfeasibleEquilibriumError, match="asin argument"):
        track_stand_equilibrium(Reference(0.0, 0.3), np.array([0.0, 20.0]), P)
    # at delta_ref = 0 a roll torque of m g h needs phi = -pi/2: outside the model domain
    with pytest.raises(InfeasibleEquilibriumError):
        track_stand_equilibrium(Reference(0.0, 0.0), np.array([0.0, P.max_roll_torque]), P)


def test_infeasible_newton_does_not_converge():
    with pytest.raises(EquilibriumSolverError) as info:
        solve_equilibrium_newton(Reference(0.0, 0.3), np.array([0.0, 20.0]), P)
    assert info.value.residual > 1e-3


def test_infeasible_optimization_saturates():
    d = np.array([0.0, 20.0])
    opt = solve_equilibrium_optimization(Reference(0.0, 0.3), d, P)
    assert not opt.feasible
    # 1-D scan: the roll row residual is smallest at the negative edge of the domain
    lim = ANGLE_LIMIT - 1e-6
    phis = np.linspace(-lim, lim, 2001)
    row = [abs(f_sys([0, 0, 0.3, ph, 0], [0, 0], d, P)[4]) for ph in phis]
    assert opt.phi_e == pytest.approx(phis[int(np.argmin(row))], abs=1e-3)


def test_input_regularization_tradeoff():
    ref, d = Reference(0.0, 0.3), np.array([0.5, 0.0])
    loose = solve_equilibrium_optimization(ref, d, P)
    tight = solve_equilibrium_optimization(ref, d, P, w_u=10.0)
    assert abs(tight.u_e[0]) < abs(loose.u_e[0])
    assert tight.residual > loose.residual


def test_matched_channel_independence():
    ref = Reference(0.0, 0.3)
    base = track_stand_equilibrium(ref, np.array([0.0, 0.4]), P)
    for d_r in (-1.0, 0.3, 2.0):
        eq = track_stand_equilibrium(ref, np.array([d_r, 0.4]), P)
        assert eq.phi_e == base.phi_e
        np.testing.assert_array_equal(eq.u_e, [-d_r, 0.0])


def test_roll_monotone_in_disturbance():
    phis = [track_stand_equilibrium(Reference(0, 0.3), np.array([0, dp]), P).phi_e
            for dp in np.linspace(-10, 10, 401)]
    assert np.all(np.diff(phis) < 0)
    assert np.max(np.abs(np.diff(phis))) < 0.2


def test_reference_validation():
    with pytest.raises(ValueError):
        Reference(0.0, math.pi / 2)
