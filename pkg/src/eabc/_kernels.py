"""Compiled inner loops for the track-stand model and the multiple-shooting solver.

Everything here works on raw float64 arrays and never raises: out-of-domain
evaluations produce non-finite numbers that the callers check. The public,
validated API lives in :mod:`eabc.dynamics`.

Parameter vector layout (see ``RobotParams.as_array``)::

    [a, b, c, h, r, lambda, m, I_t, I_r, g]

A model state has 5 entries (plant) or 7 entries (plant plus two output
integrators, used by the integrator-augmented MPC). The integrator rows are
``[s - s_ref, delta - delta_ref]``.
"""

import math

import numpy as np
from numba import njit

PA, PB, PC, PH, PR, PLAM, PM, PIT, PIR, PG = range(10)


@njit(cache=True)
def fsys(x, u, d, p, out):
    a, b, c, h, r, lam, m, It, Ir, g = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]
    v = x[1]
    dl = x[2]
    ph = x[3]
    Mr = Ir + m * r * r
    b5 = 1.0 / (m * h * h + It)
    cl = math.cos(lam)
    td = math.tan(dl)
    cd = math.cos(dl)
    tau = u[0] + d[0]
    inner = td * v * v / b + (a / b) * td * tau / Mr + (a / b) * u[1] * v / (cd * cd)
    out[0] = v
    out[1] = r / Mr * tau
    out[2] = u[1]
    out[3] = x[4]
    out[4] = b5 * (m * h * math.cos(ph) * cl * inner - m * g * (a * c / b) * cl * dl
                   + m * g * h * math.sin(ph) + d[1])


@njit(cache=True)
def fsys_jac(x, u, d, p, A, B):
    """Fill A (5x5) and B (5x2) with the Jacobians of fsys; both pre-zeroed by caller."""
    a, b, c, h, r, lam, m, It, Ir, g = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]
    v = x[1]
    dl = x[2]
    ph = x[3]
    Mr = Ir + m * r * r
    b5 = 1.0 / (m * h * h + It)
    cl = math.cos(lam)
    td = math.tan(dl)
    cd = math.cos(dl)
    sec2 = 1.0 / (cd * cd)
    cph = math.cos(ph)
    sph = math.sin(ph)
    tau = u[0] + d[0]
    w = u[1]
    inner = td * v * v / b + (a / b) * td * tau / Mr + (a / b) * w * v * sec2
    P = m * h * cl
    A[0, 1] = 1.0
    A[3, 4] = 1.0
    A[4, 1] = b5 * P * cph * (2.0 * td * v / b + (a / b) * w * sec2)
    A[4, 2] = b5 * (P * cph * (sec2 * v * v / b + (a / b) * sec2 * tau / Mr
                               + (a / b) * w * v * 2.0 * sec2 * td)
                    - m * g * (a * c / b) * cl)
    A[4, 3] = b5 * (-P * sph * inner + m * g * h * cph)
    B[1, 0] = r / Mr
    B[2, 1] = 1.0
    B[4, 0] = b5 * P * cph * (a / b) * td / Mr
    B[4, 1] = b5 * P * cph * (a / b) * v * sec2


@njit(cache=True)
def model_rhs(x, u, d, yref, p, out):
    fsys(x, u, d, p, out)
    if x.shape[0] == 7:
        out[5] = x[0] - yref[0]
        out[6] = x[2] - yref[1]


@njit(cache=True)
def model_jac(x, u, d, yref, p, A, B):
    A[:, :] = 0.0
    B[:, :] = 0.0
    fsys_jac(x, u, d, p, A[:5, :5], B[:5, :])
    if x.shape[0] == 7:
        A[5, 0] = 1.0
        A[6, 2] = 1.0


@njit(cache=True)
def rk4(x, u, d, yref, p, h, nsub):
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = x.copy()
    tmp = np.empty(n)
    for _ in range(nsub):
        model_rhs(xs, u, d, yref, p, k1)
        for i in range(n):
            tmp[i] = xs[i] + 0.5 * h * k1[i]
        model_rhs(tmp, u, d, yref, p, k2)
        for i in range(n):
            tmp[i] = xs[i] + 0.5 * h * k2[i]
        model_rhs(tmp, u, d, yref, p, k3)
        for i in range(n):
            tmp[i] = xs[i] + h * k3[i]
        model_rhs(tmp, u, d, yref, p, k4)
        for i in range(n):
            xs[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return xs


@njit(cache=True)
def rk4_sens(x, u, d, yref, p, h, nsub, Ad, Bd):
    """RK4 over ``nsub`` sub-steps, propagating exact sensitivities of the scheme.

    Returns the end state; ``Ad`` and ``Bd`` receive d(x_end)/dx and d(x_end)/du.
    """
    n = x.shape[0]
    nu = u.shape[0]
    xs = x.copy()
    Sx = np.eye(n)
    Su = np.zeros((n, nu))
    A = np.zeros((n, n))
    B = np.zeros((n, nu))
    k = np.empty((4, n))
    Kx = np.empty((4, n, n))
    Ku = np.empty((4, n, nu))
    tmp = np.empty(n)
    coef = (0.0, 0.5, 0.5, 1.0)
    for _ in range(nsub):
        for st in range(4):
            if st == 0:
                for i in range(n):
                    tmp[i] = xs[i]
                Tx = Sx.copy()
                Tu = Su.copy()
            else:
                c = coef[st] * h
                for i in range(n):
                    tmp[i] = xs[i] + c * k[st - 1, i]
                Tx = Sx + c * Kx[st - 1]
                Tu = Su + c * Ku[st - 1]
            model_rhs(tmp, u, d, yref, p, k[st])
            model_jac(tmp, u, d, yref, p, A, B)
            Kx[st] = A @ Tx
            Ku[st] = A @ Tu + B
        for i in range(n):
            xs[i] += h / 6.0 * (k[0, i] + 2.0 * k[1, i] + 2.0 * k[2, i] + k[3, i])
        Sx = Sx + h / 6.0 * (Kx[0] + 2.0 * Kx[1] + 2.0 * Kx[2] + Kx[3])
        Su = Su + h / 6.0 * (Ku[0] + 2.0 * Ku[1] + 2.0 * Ku[2] + Ku[3])
    Ad[:, :] = Sx
    Bd[:, :] = Su
    return xs


@njit(cache=True)
def discretize_nodes(X, U, d, yref, p, h, nsub, Fx, Ad, Bd):
    """Shoot every interval: Fx[k] = F(X[k], U[k]) with Jacobians Ad[k], Bd[k]."""
    N = U.shape[0]
    for k in range(N):
        Fx[k] = rk4_sens(X[k], U[k], d, yref, p, h, nsub, Ad[k], Bd[k])


@njit(cache=True)
def shoot_nodes(X, U, d, yref, p, h, nsub, Fx):
    N = U.shape[0]
    for k in range(N):
        Fx[k] = rk4(X[k], U[k], d, yref, p, h, nsub)


@njit(cache=True)
def stage_cost(X, U, xe, ue, Q, R, H, dt):
    N = U.shape[0]
    J = 0.0
    for k in range(N):
        ex = X[k] - xe
        eu = U[k] - ue
        J += dt * (ex @ Q @ ex + eu @ R @ eu)
    ex = X[N] - xe
    J += ex @ H @ ex
    return J


@njit(cache=True)
def riccati_pass(X, U, Fx, Ad, Bd, x0, xe, ue, Q, R, H, dt, mu, K, kff, dX, dU, lam):
    """LQ subproblem of one Gauss-Newton step, solved by a backward Riccati sweep.

    Defects ``Fx[k] - X[k+1]`` enter as affine terms of the linearized dynamics;
    the forward pass rolls the linear model out from ``dX[0] = x0 - X[0]`` and so
    closes all defects at full step. ``lam`` receives the costates of the LQ
    solution (multiplier estimates for the defect constraints). Returns False if
    a Hessian block is not PD.
    """
    N = U.shape[0]
    n = X.shape[1]
    nu = U.shape[1]
    Qd = Q * dt
    Rd = R * dt
    Vs = np.empty((N + 1, n, n))
    vs = np.empty((N + 1, n))
    V = H.copy()
    v = H @ (X[N] - xe)
    Vs[N] = V
    vs[N] = v
    eye_u = np.eye(nu)
    for k in range(N - 1, -1, -1):
        A = Ad[k]
        B = Bd[k]
        defect = Fx[k] - X[k + 1]
        vv = v + V @ defect
        VA = V @ A
        VB = V @ B
        Qxx = Qd + A.T @ VA
        Quu = Rd + B.T @ VB + mu * eye_u
        Qux = B.T @ VA
        qx = Qd @ (X[k] - xe) + A.T @ vv
        qu = Rd @ (U[k] - ue) + B.T @ vv
        # 2x2 positive-definiteness check via leading minors
        if nu == 2:
            if not (Quu[0, 0] > 0.0 and Quu[0, 0] * Quu[1, 1] - Quu[0, 1] * Quu[1, 0] > 0.0):
                return False
        Kk = -np.linalg.solve(Quu, Qux)
        kk = -np.linalg.solve(Quu, qu)
        K[k] = Kk
        kff[k] = kk
        V = Qxx + Kk.T @ Quu @ Kk + Kk.T @ Qux + Qux.T @ Kk
        V = 0.5 * (V + V.T)
        v = qx + Kk.T @ Quu @ kk + Kk.T @ qu + Qux.T @ kk
        Vs[k] = V
        vs[k] = v
    dX[0] = x0 - X[0]
    for k in range(N):
        dU[k] = kff[k] + K[k] @ dX[k]
        dX[k + 1] = Ad[k] @ dX[k] + Bd[k] @ dU[k] + (Fx[k] - X[k + 1])
    for k in range(N + 1):
        lam[k] = Vs[k] @ dX[k] + vs[k]
    return True
