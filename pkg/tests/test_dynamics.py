import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eabc.dynamics import (
    DomainError,
    RobotParams,
    controllability_matrix,
    delta_projection,
    f_sys,
    integrate_rk4,
    lateral_acceleration,
    linearize,
    structured_form,
    trail_length,
    turning_radius,
    yaw_deviation,
)
from eabc.equilibrium import Reference, track_stand_equilibrium

P = RobotParams()


def printed_model(x, u, d, a=0.140, b=0.408, c=0.024, h=0.2, r=0.1, lam_deg=25.0,
                  m=7.4, I_t=0.356, I_r=0.02, g=9.81):
    """Independent scalar transcription of the assembled model, used as oracle."""
    s, v, dl, ph, phd = x
    tau, ddot = u
    d_r, d_phi = d
    lam = math.radians(lam_deg)
    M = I_r + m * r**2
    roll = (m * h * math.cos(ph) * math.cos(lam)
            * (math.tan(dl) * v**2 / b + a / b * math.tan(dl) * (tau + d_r) / M
               + a / b * ddot * v / math.cos(dl) ** 2)
            - m * g * a * c / b * math.cos(lam) * dl + m * g * h * math.sin(ph) + d_phi)
    return np.array([v, r / M * (tau + d_r), ddot, phd, roll / (m * h**2 + I_t)])


def random_points(rng, n):
    x = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(-1.4, 1.4, n),
                         rng.uniform(-1.4, 1.4, n), rng.uniform(-3, 3, n)])
    u = rng.uniform(-3, 3, (n, 2))
    d = rng.uniform(-1, 1, (n, 2))
    return x, u, d


def test_defaults_match_table():
    assert (P.a, P.b, P.c, P.h, P.r, P.m, P.I_t, P.I_r) == (0.140, 0.408, 0.024, 0.2, 0.1, 7.4, 0.356, 0.02)
    assert P.lam == pytest.approx(math.radians(25.0), abs=0)
    assert P.g == 9.81


def test_params_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        RobotParams(m=-1.0)
    with pytest.raises(ValueError):
        RobotParams(lam=2.0)
    path = tmp_path / "robot.json"
    path.write_text(json.dumps({"m": 8.0, "lambda_deg": 20}))
    p = RobotParams.from_json(path)
    assert p.m == 8.0 and p.lam == pytest.approx(math.radians(20))
    assert RobotParams.from_dict(P.to_dict()) == P
    with pytest.raises(ValueError, match="unknown"):
        RobotParams.from_dict({"mass": 3})


def test_delta_projection():
    assert delta_projection(0.0, 0.2, P) == 0.0
    # tan(0.3) cos(25 deg) = 0.28036..., atan of that is 0.27334
    assert delta_projection(0.3, 0.0, P) == pytest.approx(0.27334, abs=5e-6)
    assert delta_projection(0.3, 0.0, P) == pytest.approx(math.atan(math.tan(0.3) * math.cos(P.lam)), abs=1e-15)
    scan = [delta_projection(0.3, ph, P) for ph in np.linspace(0, 0.5, 51)]
    assert np.all(np.diff(scan) > 0)
    with pytest.raises(DomainError):
        delta_projection(0.3, math.pi / 2, P)


def test_trail_and_yaw():
    assert trail_length(0.0, P) == 0.024
    assert trail_length(0.4, P) == trail_length(-0.4, P)
    assert trail_length(0.5, P) == pytest.approx(0.01829, abs=5e-6)
    assert yaw_deviation(0.0, 0.0, P) == 0.0
    # the trail approximation turns negative once cos(delta) < 1 - c / (r tan(lambda))
    edge = math.acos(1.0 - P.c / (P.r * math.tan(P.lam)))
    for dl in np.linspace(-edge, edge, 41)[1:-1]:
        if dl != 0:
            assert np.sign(yaw_deviation(dl, 0.0, P)) == np.sign(dl)
    assert yaw_deviation(1.5, 0.0, P) < 0
    dp = math.atan(math.tan(0.3) * math.cos(P.lam))
    assert yaw_deviation(0.3, 0.0, P) == pytest.approx(trail_length(0.3, P) / P.b * math.sin(dp), rel=1e-14)


def test_turning_radius():
    assert turning_radius(0.0, 0.0, P) == math.inf
    # delta_p = pi/4 when tan(delta) cos(lambda) = 1
    dl = math.atan(1.0 / math.cos(P.lam))
    assert turning_radius(dl, 0.0, P) == pytest.approx(P.b, rel=1e-12)
    assert turning_radius(0.3, 0.0, P) == pytest.approx(P.b / math.tan(delta_projection(0.3, 0, P)))


def test_lateral_acceleration():
    assert lateral_acceleration([0, 0, 0.3, 0.1, 0.2], 0.0, 0.0, P) == 0.0
    expected = P.a * math.cos(P.lam) / P.b * math.tan(0.3)
    assert lateral_acceleration([0, 0, 0.3, 0, 0], 1.0, 0.0, P) == pytest.approx(expected, rel=1e-14)
    rng = np.random.default_rng(1)
    for _ in range(200):
        v, dl, ph, phd, vd, dd = rng.uniform(-1, 1, 6)
        lhs = lateral_acceleration([0, v, -dl, -ph, -phd], vd, -dd, P)
        assert lhs == pytest.approx(-lateral_acceleration([0, v, dl, ph, phd], vd, dd, P), abs=1e-13)


def test_fsys_matches_printed_model():
    rng = np.random.default_rng(0)
    x, u, d = random_points(rng, 200)
    for i in range(200):
        np.testing.assert_allclose(f_sys(x[i], u[i], d[i], P), printed_model(x[i], u[i], d[i]),
                                   rtol=1e-13, atol=1e-12)


def test_fsys_rear_gain():
    xdot = f_sys([0, 0, 0, 0, 0], [1.0, 0], [0, 0], P)
    assert xdot[1] == pytest.approx(0.1 / 0.094, rel=1e-12)
    assert xdot[1] == pytest.approx(1.06383, abs=1e-5)


def test_fsys_zero_at_equilibrium():
    eq = track_stand_equilibrium(Reference(0.4, 0.3), np.zeros(2), P)
    assert np.max(np.abs(f_sys(eq.x_e, [0, 0], [0, 0], P))) < 1e-12


def test_fsys_domain_guard():
    with pytest.raises(DomainError):
        f_sys([0, 0, math.pi / 2, 0, 0], [0, 0], [0, 0], P)
    with pytest.raises(ValueError):
        f_sys([0, 0, 0], [0, 0], [0, 0], P)


def test_mirror_symmetry_random():
    rng = np.random.default_rng(2)
    x, u, d = random_points(rng, 1000)
    flip_x = np.array([1, 1, -1, -1, -1])
    for i in range(1000):
        a = f_sys(x[i], u[i], d[i], P)
        b = f_sys(x[i] * flip_x, u[i] * [1, -1], d[i] * [1, -1], P)
        np.testing.assert_allclose(b, a * flip_x, rtol=0, atol=1e-12)


def test_structured_form_consistency():
    rng = np.random.default_rng(3)
    x, u, d = random_points(rng, 1000)
    worst = 0.0
    for i in range(1000):
        f, G_u, G_d = structured_form(x[i], P)
        worst = max(worst, np.max(np.abs(f + G_u @ u[i] + G_d @ d[i] - f_sys(x[i], u[i], d[i], P))))
    assert worst < 1e-12


def test_structured_form_layout():
    f, G_u, G_d = structured_form([0.1, 0.2, 0.3, 0.05, 0.1], P)
    assert np.all(G_u[0] == 0) and np.all(G_u[3] == 0)
    np.testing.assert_array_equal(G_u[2], [0, 1])
    np.testing.assert_array_equal(G_d[:, 0], G_u[:, 0])
    assert G_d[4, 1] == pytest.approx(P.beta5)


def test_linearize_analytic_vs_fd():
    rng = np.random.default_rng(4)
    x, u, d = random_points(rng, 100)
    for i in range(100):
        an = linearize(x[i], u[i], d[i], P)
        fd = linearize(x[i], u[i], d[i], P, method="finite-difference")
        for M, N in ((an.A, fd.A), (an.B_u, fd.B_u), (an.B_d, fd.B_d)):
            assert np.max(np.abs(M - N)) < 1e-5
        assert an.A[0, 1] == 1.0
        _, G_u, _ = structured_form(x[i], P)
        np.testing.assert_allclose(an.B_u[:, 1], G_u[:, 1], rtol=1e-14, atol=0)


@pytest.mark.parametrize("delta_e", [-0.6, -0.3, -0.1, 0.1, 0.3, 0.6])
def test_controllable_at_equilibria(delta_e):
    eq = track_stand_equilibrium(Reference(0.0, delta_e), np.zeros(2), P)
    lin = linearize(eq.x_e, eq.u_e, np.zeros(2), P)
    sv = np.linalg.svd(controllability_matrix(lin.A, lin.B_u), compute_uv=False)
    assert sv[-1] / sv[0] > 1e-8


def test_rk4_fixed_point_and_order():
    d = np.array([0.05, 0.2])
    eq = track_stand_equilibrium(Reference(0.0, 0.3), d, P)
    np.testing.assert_allclose(integrate_rk4(eq.x_e, eq.u_e, d, P, 0.01), eq.x_e, atol=1e-12)

    x0 = np.array([0.0, 0.1, 0.3, 0.05, -0.1])
    u = np.array([0.2, 0.5])
    T = 0.2
    ref = integrate_rk4(x0, u, [0, 0], P, T, substeps=400)
    errs = [np.max(np.abs(integrate_rk4(x0, u, [0, 0], P, T, substeps=n) - ref)) for n in (4, 8)]
    order = math.log2(errs[0] / errs[1])
    assert 3.7 <= order <= 4.3


def test_free_roll_falls_monotonically():
    x = np.array([0.0, 0.0, 0.0, 0.01, 0.0])
    phis = [x[3]]
    for _ in range(50):
        x = integrate_rk4(x, [0, 0], [0, 0], P, 0.01)
        phis.append(x[3])
    assert np.all(np.diff(phis) > 0)


def test_upright_rest_stays_at_rest():
    x = np.zeros(5)
    assert np.all(integrate_rk4(x, [0, 0], [0, 0], P, 0.5, substeps=50) == 0)


angles = st.floats(-1.4, 1.4, allow_nan=False)
small = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(small, small, angles, angles, small), st.tuples(small, small), st.tuples(small, small))
def test_decomposition_property(x, u, d):
    f, G_u, G_d = structured_form(x, P)
    lhs = f + G_u @ np.array(u) + G_d @ np.array(d)
    scale = max(1.0, np.max(np.abs(lhs)))
    assert np.max(np.abs(lhs - f_sys(x, u, d, P))) < 1e-12 * scale
