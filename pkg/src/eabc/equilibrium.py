"""Disturbed equilibrium estimation.

Given a disturbance estimate and an output reference ``y_ref = [s_ref,
delta_ref]``, find ``(x_e, u_e)`` with

    f_sys(x_e, u_e, d_hat) = 0,   C_o x_e = y_ref.

For the track stand this has a closed form; a Newton solver and a
least-squares fallback handle the general case and serve as cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ANGLE_LIMIT, N_U, N_X, DomainError, RobotParams, f_sys, linearize

C_O = np.array([[1.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0, 0.0]])

FEASIBLE_TOL = 1e-9


class InfeasibleEquilibriumError(ValueError):
    """No roll equilibrium exists for the requested steering angle and disturbance."""


class EquilibriumSolverError(RuntimeError):
    def __init__(self, message: str, x: np.ndarray, u: np.ndarray, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.x = x
        self.u = u
        self.residual = residual


@dataclass(frozen=True)
class Reference:
    s_ref: float = 0.0
    delta_ref: float = 0.3

    def __post_init__(self) -> None:
        if not abs(self.delta_ref) < math.pi / 2:
            raise ValueError("delta_ref must satisfy |delta_ref| < pi/2")

    @property
    def y(self) -> np.ndarray:
        return np.array([self.s_ref, self.delta_ref])


@dataclass(frozen=True)
class EquilibriumPoint:
    x_e: np.ndarray
    u_e: np.ndarray
    residual: float
    feasible: bool
    iterations: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def phi_e(self) -> float:
        return float(self.x_e[3])


def equation_residual(x, u, reference: Reference, d_hat, params: RobotParams) -> np.ndarray:
    """Stacked dynamics and output rows; zero exactly at a disturbed equilibrium."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([f_sys(x, u, d_hat, params), C_O @ x - reference.y])


def roll_equilibrium_argument(delta_ref: float, d_phi: float, params: RobotParams) -> float:
    """Argument of the arcsine giving the equilibrium roll angle."""
    return (params.balance_gain * delta_ref - d_phi) / params.max_roll_torque


def track_stand_equilibrium(reference: Reference, d_hat, params: RobotParams) -> EquilibriumPoint:
    """Closed-form disturbed equilibrium of the track stand.

    The matched disturbance is cancelled by the rear torque, ``u_e = [-d_r, 0]``;
    the mismatched roll torque is balanced by leaning to
    ``phi_e = asin((m g (a c / b) cos(lambda) delta_ref - d_phi) / (m g h))``
    on the principal branch.

    Raises:
        InfeasibleEquilibriumError: if the arcsine argument leaves [-1, 1], or the
            resulting roll angle is outside the model domain.
    """
    d_r, d_phi = (float(v) for v in np.asarray(d_hat, dtype=float).reshape(2))
    arg = roll_equilibrium_argument(reference.delta_ref, d_phi, params)
    if not -1.0 <= arg <= 1.0:
        raise InfeasibleEquilibriumError(
            f"balance impossible under estimated disturbance: asin argument {arg:.4f} "
            f"outside [-1, 1] (delta_ref={reference.delta_ref:.4f} rad, d_phi={d_phi:.4f} N m)")
    phi_e = math.asin(arg)
    if abs(phi_e) >= ANGLE_LIMIT:
        raise InfeasibleEquilibriumError(
            f"balance impossible under estimated disturbance: roll equilibrium {phi_e:.4f} rad "
            "at the edge of the model domain")
    x_e = np.array([reference.s_ref, 0.0, reference.delta_ref, phi_e, 0.0])
    u_e = np.array([0.0 - d_r, 0.0])
    res = float(np.max(np.abs(equation_residual(x_e, u_e, reference, d_hat, params))))
    return EquilibriumPoint(x_e=x_e, u_e=u_e, residual=res, feasible=res < FEASIBLE_TOL)


def _jacobian(x, u, d_hat, params):
    lin = linearize(x, u, d_hat, params)
    top = np.hstack([lin.A, lin.B_u])
    bottom = np.hstack([C_O, np.zeros((2, N_U))])
    return np.vstack([top, bottom])


def solve_equilibrium_newton(reference: Reference, d_hat, params: RobotParams,
                             x0=None, u0=None, tol: float = 1e-10,
                             max_iter: int = 50) -> EquilibriumPoint:
    """Newton iteration on the 7x7 equilibrium system.

    A singular Jacobian hands over to :func:`solve_equilibrium_optimization`.

    Raises:
        EquilibriumSolverError: no convergence within ``max_iter`` or the iterate
            left the model domain; carries the last iterate and residual.
    """
    z = np.concatenate([
        np.zeros(N_X) if x0 is None else np.asarray(x0, dtype=float),
        np.zeros(N_U) if u0 is None else np.asarray(u0, dtype=float),
    ])
    res = np.inf
    for it in range(max_iter + 1):
        x, u = z[:N_X], z[N_X:]
        try:
            F = equation_residual(x, u, reference, d_hat, params)
            res = float(np.max(np.abs(F)))
            if res < tol:
                return EquilibriumPoint(x_e=x.copy(), u_e=u.copy(), residual=res,
                                        feasible=res < FEASIBLE_TOL, iterations=it)
            if it == max_iter:
                break
            J = _jacobian(x, u, d_hat, params)
            if np.linalg.cond(J) > 1e12:
                raise np.linalg.LinAlgError("singular equilibrium Jacobian")
            z = z - np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            fallback = solve_equilibrium_optimization(reference, d_hat, params)
            if fallback.feasible:
                return fallback
            raise EquilibriumSolverError("singular Jacobian and no feasible fallback",
                                         fallback.x_e, fallback.u_e, fallback.residual)
        except DomainError:
            raise EquilibriumSolverError("Newton iterate left the model domain",
                                         x.copy(), u.copy(), res) from None
    raise EquilibriumSolverError(f"Newton did not converge in {max_iter} iterations",
                                 z[:N_X].copy(), z[N_X:].copy(), res)


def solve_equilibrium_optimization(reference: Reference, d_hat, params: RobotParams,
                                   w_x: float = 1e-8, w_u: float = 1e-8,
                                   max_iter: int = 200) -> EquilibriumPoint:
    """Least-squares equilibrium: minimize ``|F|^2 + |w_x x|^2 + |w_u u|^2``.

    Damped Gauss-Newton (Levenberg-Marquardt) from the zero guess, with the roll
    and steering angles kept inside the model domain. Never raises on
    infeasibility; ``feasible`` reports whether ``|F|_inf < 1e-9``.
    """
    n = N_X + N_U
    lim = ANGLE_LIMIT - 1e-6

    def project(z):
        z = z.copy()
        z[2] = np.clip(z[2], -lim, lim)
        z[3] = np.clip(z[3], -lim, lim)
        return z

    def residuals(z):
        F = equation_residual(z[:N_X], z[N_X:], reference, d_hat, params)
        return np.concatenate([F, w_x * z[:N_X], w_u * z[N_X:]]), F

    W = np.diag(np.concatenate([np.full(N_X, w_x), np.full(N_U, w_u)]))
    z = np.zeros(n)
    r, F = residuals(z)
    cost = r @ r
    mu = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        J = np.vstack([_jacobian(z[:N_X], z[N_X:], d_hat, params), W])
        g = J.T @ r
        H = J.T @ J
        improved = False
        while mu < 1e12:
            step = np.linalg.solve(H + mu * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            z_new = project(z + step)
            r_new, F_new = residuals(z_new)
            cost_new = r_new @ r_new
            if cost_new < cost:
                improved = True
                break
            mu *= 10.0
        if not improved:
            break
        converged = cost - cost_new <= 1e-30 + 1e-15 * cost
        z, r, F, cost = z_new, r_new, F_new, cost_new
        mu = max(mu / 10.0, 1e-12)
        if converged or np.max(np.abs(step)) < 1e-15:
            break
    res = float(np.max(np.abs(F)))
    return EquilibriumPoint(x_e=z[:N_X].copy(), u_e=z[N_X:].copy(), residual=res,
                            feasible=res < FEASIBLE_TOL, iterations=it)
