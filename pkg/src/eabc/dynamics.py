"""Single-track two-wheeled robot model for the track-stand maneuver.

State ``x = [s, v_r, delta, phi, phi_dot]``: traveled distance, rear-wheel
velocity, steering angle, roll angle, roll rate. Input ``u = [tau_r,
delta_dot]``: rear-wheel torque and steering rate. Disturbance ``d = [d_r,
d_phi]``: lumped rear-wheel torque disturbance (matched) and roll torque
disturbance (mismatched).

The roll row uses the assembled model form, in which the normal-force /
yaw-deviation coupling has already been reduced to the linear
``-m g (a c / b) cos(lambda) delta`` term. The geometric helpers
(:func:`delta_projection`, :func:`trail_length`, ...) are kept for analysis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from . import _kernels

N_X = 5
N_U = 2
N_D = 2

STATE_NAMES = ("s", "v_r", "delta", "phi", "phi_dot")
INPUT_NAMES = ("tau_r", "delta_dot")
DISTURBANCE_NAMES = ("d_r", "d_phi")

# |delta| and |phi| must stay below this; the small-angle model pieces break down near pi/2
ANGLE_LIMIT = math.pi / 2 - 1e-3


class DomainError(ValueError):
    """Raised when an angle leaves the region where the model is defined."""


@dataclass(frozen=True)
class RobotParams:
    """Physical constants of the robot. Defaults are the test-bench values."""

    a: float = 0.140  # COM to rear contact [m]
    b: float = 0.408  # wheelbase [m]
    c: float = 0.024  # nominal trail [m]
    h: float = 0.2  # COM height [m]
    r: float = 0.1  # wheel radius [m]
    lam: float = math.radians(25.0)  # caster angle [rad]
    m: float = 7.4  # total mass [kg]
    I_t: float = 0.356  # roll inertia [kg m^2]
    I_r: float = 0.02  # rear-wheel inertia [kg m^2]
    g: float = 9.81

    def __post_init__(self) -> None:
        for f in fields(self):
            val = getattr(self, f.name)
            if not (math.isfinite(val) and val > 0.0):
                raise ValueError(f"RobotParams.{f.name} must be finite and > 0, got {val}")
        if not self.lam < math.pi / 2:
            raise ValueError("caster angle must lie in (0, pi/2)")
        object.__setattr__(self, "_array", np.array(
            [self.a, self.b, self.c, self.h, self.r, self.lam, self.m, self.I_t, self.I_r, self.g]))

    @property
    def beta2(self) -> float:
        """Rear-wheel acceleration per unit torque."""
        return self.r / (self.I_r + self.m * self.r**2)

    @property
    def beta5(self) -> float:
        """Roll acceleration per unit roll torque."""
        return 1.0 / (self.m * self.h**2 + self.I_t)

    @property
    def balance_gain(self) -> float:
        """Coefficient of delta in the gravitational trail torque, m g (a c / b) cos(lambda)."""
        return self.m * self.g * self.a * self.c / self.b * math.cos(self.lam)

    @property
    def max_roll_torque(self) -> float:
        """m g h: gravity's roll torque at 90 degrees of roll."""
        return self.m * self.g * self.h

    def as_array(self) -> np.ndarray:
        return self._array  # type: ignore[attr-defined]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "RobotParams":
        """Build from a mapping using the table names (``lambda`` in radians, or ``lambda_deg``)."""
        data = dict(data)
        if "lambda_deg" in data:
            data["lam"] = math.radians(data.pop("lambda_deg"))
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown robot parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def from_json(cls, path: str | Path) -> "RobotParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LinearizedModel:
    A: np.ndarray
    B_u: np.ndarray
    B_d: np.ndarray
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray


def _check_angles(delta, phi=0.0) -> None:
    if not (np.all(np.abs(delta) < ANGLE_LIMIT) and np.all(np.abs(phi) < ANGLE_LIMIT)):
        raise DomainError(
            f"angles outside the model domain (|delta|, |phi| < {ANGLE_LIMIT:.4f}): "
            f"delta={delta}, phi={phi}")


def delta_projection(delta: float, phi: float, params: RobotParams) -> float:
    """Steering angle projected on the ground plane."""
    _check_angles(delta, phi)
    return math.atan(math.tan(delta) * math.cos(params.lam) / math.cos(phi))


def trail_length(delta: float, params: RobotParams) -> float:
    return params.c + params.r * math.tan(params.lam) * (math.cos(delta) - 1.0)


def yaw_deviation(delta: float, phi: float, params: RobotParams) -> float:
    return trail_length(delta, params) / params.b * math.sin(delta_projection(delta, phi, params))


def turning_radius(delta: float, phi: float, params: RobotParams) -> float:
    """Rear-wheel turning radius ``b / tan(delta_p)``; ``math.inf`` when driving straight."""
    dp = delta_projection(delta, phi, params)
    t = math.tan(dp)
    if abs(t) < 1e-12:
        return math.inf
    return params.b / t


def lateral_acceleration(x, v_r_dot: float, delta_dot: float, params: RobotParams) -> float:
    """Lateral acceleration of the body frame origin, which drives the roll motion."""
    _, v, dl, ph, ph_dot = (float(val) for val in x)
    _check_angles(dl, ph)
    a, b, cl = params.a, params.b, math.cos(params.lam)
    td, cphi = math.tan(dl), math.cos(ph)
    return (v * v * td * cl / (b * cphi)
            + a * cl / (b * cphi) * (v_r_dot * td + v * delta_dot / math.cos(dl) ** 2)
            + a * v * td * cl * math.tan(ph) / (b * cphi) * ph_dot)


def _as_vec(val, n: int, name: str) -> np.ndarray:
    arr = np.asarray(val, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} entries, got shape {np.shape(val)}")
    return np.ascontiguousarray(arr)


def f_sys(x, u, d, params: RobotParams) -> np.ndarray:
    """Time derivative of the state."""
    x = _as_vec(x, N_X, "state")
    u = _as_vec(u, N_U, "input")
    d = _as_vec(d, N_D, "disturbance")
    _check_angles(x[2], x[3])
    out = np.empty(N_X)
    _kernels.fsys(x, u, d, params.as_array(), out)
    return out


def structured_form(x, params: RobotParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the vector field as ``f(x) + G_u(x) u + G_d(x) d``.

    Returns ``(f, G_u, G_d)`` with shapes (5,), (5, 2), (5, 2).
    """
    x = _as_vec(x, N_X, "state")
    s, v, dl, ph, ph_dot = x
    _check_angles(dl, ph)
    p = params
    cl, cph, td, cd = math.cos(p.lam), math.cos(ph), math.tan(dl), math.cos(dl)
    Mr = p.I_r + p.m * p.r**2
    b5 = p.beta5
    beta1 = b5 * (p.m * p.h * cph * cl * (td * v * v / p.b)
                  - p.balance_gain * dl + p.m * p.g * p.h * math.sin(ph))
    beta3 = p.a * p.m * p.h * cph * cl * td / (p.b * Mr) * b5
    beta4 = p.a * p.m * p.h * cph * cl * v / (p.b * cd * cd) * b5
    f = np.array([v, 0.0, 0.0, ph_dot, beta1])
    G_u = np.array([[0.0, 0.0], [p.beta2, 0.0], [0.0, 1.0], [0.0, 0.0], [beta3, beta4]])
    G_d = np.array([[0.0, 0.0], [p.beta2, 0.0], [0.0, 0.0], [0.0, 0.0], [beta3, b5]])
    return f, G_u, G_d


def _jacobians_analytic(x, u, d, params):
    A = np.zeros((N_X, N_X))
    B = np.zeros((N_X, N_U))
    _kernels.fsys_jac(x, u, d, params.as_array(), A, B)
    # the disturbance enters exactly like the torque (d_r) or as a pure roll torque (d_phi)
    B_d = np.zeros((N_X, N_D))
    B_d[:, 0] = B[:, 0]
    B_d[4, 1] = params.beta5
    return A, B, B_d


def _jacobians_fd(x, u, d, params):
    def col(fun, z, i):
        step = 1e-6 * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        return (fun(zp) - fun(zm)) / (2 * step)

    A = np.column_stack([col(lambda z: f_sys(z, u, d, params), x, i) for i in range(N_X)])
    B = np.column_stack([col(lambda z: f_sys(x, z, d, params), u, i) for i in range(N_U)])
    B_d = np.column_stack([col(lambda z: f_sys(x, u, z, params), d, i) for i in range(N_D)])
    return A, B, B_d


def linearize(x, u, d, params: RobotParams,
              method: Literal["analytic", "finite-difference"] = "analytic") -> LinearizedModel:
    x = _as_vec(x, N_X, "state")
    u = _as_vec(u, N_U, "input")
    d = _as_vec(d, N_D, "disturbance")
    _check_angles(x[2], x[3])
    if method == "analytic":
        A, B, B_d = _jacobians_analytic(x, u, d, params)
    elif method == "finite-difference":
        A, B, B_d = _jacobians_fd(x, u, d, params)
    else:
        raise ValueError(f"unknown linearization method {method!r}")
    return LinearizedModel(A=A, B_u=B, B_d=B_d, x=x, u=u, d=d)


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def integrate_rk4(x, u, d, params: RobotParams, dt: float, substeps: int = 1) -> np.ndarray:
    """Classical RK4 with input and disturbance held over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = _as_vec(x, N_X, "state")
    u = _as_vec(u, N_U, "input")
    d = _as_vec(d, N_D, "disturbance")
    _check_angles(x[2], x[3])
    out = _kernels.rk4(x, u, d, np.zeros(2), params.as_array(), dt / substeps, substeps)
    if not np.all(np.isfinite(out)):
        raise DomainError("RK4 step left the model domain")
    _check_angles(out[2], out[3])
    return out
