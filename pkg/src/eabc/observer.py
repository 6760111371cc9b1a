"""Joint state and disturbance estimation on the extended system.

The extended state stacks the plant state and the disturbance,
``xbar = [x, d]`` (7 entries). The observer's internal model treats the
disturbance as constant. Prediction integrates the extended dynamics with RK4;
the correction uses a Kalman gain either from the running covariance
(``filtered-covariance``) or from the converged discrete Riccati iterate at the
current linearization point (``steady-state-gain``, refreshed when the
estimate drifts away from the point it was computed at).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import _kernels
from .dynamics import N_D, N_U, N_X, RobotParams, f_sys, linearize

N_XBAR = N_X + N_D
N_Y = 4

C_M = np.hstack([np.eye(4), np.zeros((4, 1))])
C_BAR = np.hstack([C_M, np.zeros((N_Y, N_D))])

DEFAULT_Q = (1e-6, 1e-4, 1e-6, 1e-5, 1e-3, 1e-2, 1e-2)
DEFAULT_R = (1e-6, 1e-5, 1e-6, 1e-6)


class ObserverConfigError(ValueError):
    """Riccati iteration did not converge (e.g. undetectable pair) or bad covariances."""


class ObserverNumericalError(RuntimeError):
    """Covariance lost positive definiteness and could not be repaired."""


@dataclass(frozen=True)
class ObserverConfig:
    Q_proc: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_Q))
    R_meas: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_R))
    dt: float = 0.005
    mode: str = "steady-state-gain"
    refresh_threshold: float = 0.05
    riccati_tol: float = 1e-10
    riccati_max_iter: int = 10_000

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q_proc, dtype=float)
        R = np.asarray(self.R_meas, dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        if R.ndim == 1:
            R = np.diag(R)
        object.__setattr__(self, "Q_proc", Q)
        object.__setattr__(self, "R_meas", R)
        if Q.shape != (N_XBAR, N_XBAR) or R.shape != (N_Y, N_Y):
            raise ObserverConfigError("Q_proc must be 7x7 and R_meas 4x4")
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-15:
            raise ObserverConfigError("Q_proc must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
            raise ObserverConfigError("R_meas must be positive definite")
        if not self.dt > 0:
            raise ObserverConfigError("dt must be positive")
        if self.mode not in ("filtered-covariance", "steady-state-gain"):
            raise ObserverConfigError(f"unknown observer mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "Q_proc": np.diag(self.Q_proc).tolist() if _is_diag(self.Q_proc) else self.Q_proc.tolist(),
            "R_meas": np.diag(self.R_meas).tolist() if _is_diag(self.R_meas) else self.R_meas.tolist(),
            "dt": self.dt,
            "mode": self.mode,
            "refresh_threshold": self.refresh_threshold,
            "riccati_tol": self.riccati_tol,
            "riccati_max_iter": self.riccati_max_iter,
        }


def _is_diag(M: np.ndarray) -> bool:
    return np.array_equal(M, np.diag(np.diag(M)))


@dataclass(frozen=True)
class ExtendedEstimate:
    """Observer state: estimate ``[x_hat, d_hat]``, covariance and gain in use."""

    xbar_hat: np.ndarray
    P: np.ndarray
    gain: np.ndarray
    lin_point: np.ndarray | None = None
    gain_refreshes: int = 0

    @property
    def x_hat(self) -> np.ndarray:
        return self.xbar_hat[:N_X]

    @property
    def d_hat(self) -> np.ndarray:
        return self.xbar_hat[N_X:]


def extended_dynamics(xbar, u, params: RobotParams) -> np.ndarray:
    xbar = np.asarray(xbar, dtype=float)
    return np.concatenate([f_sys(xbar[:N_X], u, xbar[N_X:], params), np.zeros(N_D)])


def extended_jacobian(xbar, u, params: RobotParams) -> np.ndarray:
    """Continuous-time Jacobian of the extended vector field with respect to ``xbar``."""
    xbar = np.asarray(xbar, dtype=float)
    lin = linearize(xbar[:N_X], u, xbar[N_X:], params)
    A = np.zeros((N_XBAR, N_XBAR))
    A[:N_X, :N_X] = lin.A
    A[:N_X, N_X:] = lin.B_d
    return A


def measure(state) -> np.ndarray:
    """Measured outputs ``[s, v_r, delta, phi]``; the roll rate is not measured."""
    return C_M @ np.asarray(state, dtype=float)


def steady_state_gain(F: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray,
                      tol: float = 1e-10, max_iter: int = 10_000,
                      callback=None) -> tuple[np.ndarray, np.ndarray]:
    """Kalman gain from the fixed point of the discrete Riccati recursion.

    Iterates the predicted-covariance recursion from ``P = Q`` until the
    max-abs change drops below ``tol``. Returns ``(L, P)`` with ``L`` the
    measurement-update gain ``P C^T (C P C^T + R)^-1``. ``callback(P)`` is
    called on every iterate.

    Raises:
        ObserverConfigError: no convergence within ``max_iter`` iterations.
    """
    P = np.array(Q, dtype=float, copy=True)
    for _ in range(max_iter):
        S = C @ P @ C.T + R
        PCt = P @ C.T
        P_next = F @ (P - PCt @ np.linalg.solve(S, PCt.T)) @ F.T + Q
        P_next = 0.5 * (P_next + P_next.T)
        if callback is not None:
            callback(P_next)
        if not np.all(np.isfinite(P_next)):
            break
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            L = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
            return L, P
        P = P_next
    raise ObserverConfigError(
        "steady-state Riccati iteration did not converge; is the pair (F, C) detectable?")


def discrete_jacobian(xbar, u, params: RobotParams, dt: float) -> np.ndarray:
    return expm(extended_jacobian(xbar, u, params) * dt)


def closed_loop_matrix(F: np.ndarray, L: np.ndarray, C: np.ndarray = C_BAR) -> np.ndarray:
    """Error transition of the predict-then-correct observer, ``(I - L C) F``."""
    return (np.eye(F.shape[0]) - L @ C) @ F


def initial_estimate(x0, config: ObserverConfig, params: RobotParams, d0=None,
                     u0=None, P0=None) -> ExtendedEstimate:
    xbar = np.concatenate([np.asarray(x0, dtype=float),
                           np.zeros(N_D) if d0 is None else np.asarray(d0, dtype=float)])
    u0 = np.zeros(N_U) if u0 is None else np.asarray(u0, dtype=float)
    F = discrete_jacobian(xbar, u0, params, config.dt)
    L, P_pred = steady_state_gain(F, C_BAR, config.Q_proc, config.R_meas,
                                  config.riccati_tol, config.riccati_max_iter)
    P = P_pred if P0 is None else np.asarray(P0, dtype=float)
    return ExtendedEstimate(xbar_hat=xbar, P=P, gain=L, lin_point=xbar.copy())


def _predict_mean(xbar, u, params, dt):
    x = np.ascontiguousarray(xbar[:N_X])
    d = np.ascontiguousarray(xbar[N_X:])
    x_next = _kernels.rk4(x, np.ascontiguousarray(u, dtype=float), d, np.zeros(2),
                          params.as_array(), dt, 1)
    return np.concatenate([x_next, d])


def _repair(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if np.min(w) > 0:
        return P
    floor = 1e-12 * max(1.0, float(np.max(np.abs(w))))
    P = (V * np.maximum(w, floor)) @ V.T
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise ObserverNumericalError("covariance is not positive definite after repair")
    return P


def observer_step(estimate: ExtendedEstimate, u, y, config: ObserverConfig,
                  params: RobotParams) -> ExtendedEstimate:
    """Predict over ``config.dt`` holding ``u``, then correct with measurement ``y``."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    xbar = estimate.xbar_hat
    xbar_pred = _predict_mean(xbar, u, params, config.dt)
    if not np.all(np.isfinite(xbar_pred)):
        raise ObserverNumericalError("observer prediction diverged")
    innovation = y - C_BAR @ xbar_pred

    if config.mode == "filtered-covariance":
        F = discrete_jacobian(xbar, u, params, config.dt)
        P_pred = F @ estimate.P @ F.T + config.Q_proc
        S = C_BAR @ P_pred @ C_BAR.T + config.R_meas
        L = P_pred @ C_BAR.T @ np.linalg.inv(S)
        IKC = np.eye(N_XBAR) - L @ C_BAR
        # Joseph form keeps the update symmetric PSD
        P = IKC @ P_pred @ IKC.T + L @ config.R_meas @ L.T
        P = _repair(P)
        return ExtendedEstimate(xbar_hat=xbar_pred + L @ innovation, P=P, gain=L,
                                lin_point=estimate.lin_point,
                                gain_refreshes=estimate.gain_refreshes)

    L, P, lin_point, refreshes = estimate.gain, estimate.P, estimate.lin_point, estimate.gain_refreshes
    if lin_point is None or np.max(np.abs(xbar - lin_point)) > config.refresh_threshold:
        F = discrete_jacobian(xbar, u, params, config.dt)
        L, P = steady_state_gain(F, C_BAR, config.Q_proc, config.R_meas,
                                 config.riccati_tol, config.riccati_max_iter)
        lin_point = xbar.copy()
        refreshes += 1
    return ExtendedEstimate(xbar_hat=xbar_pred + L @ innovation, P=P, gain=L,
                            lin_point=lin_point, gain_refreshes=refreshes)


def reset_gain(estimate: ExtendedEstimate) -> ExtendedEstimate:
    """Force a gain refresh on the next steady-state step."""
    return replace(estimate, lin_point=None)
