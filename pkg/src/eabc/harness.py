"""Deterministic multirate closed-loop simulation.

Rates, all in simulated time on one integer tick counter:

* plant RK4 and steering actuator: every tick (1 kHz by default)
* measurement, observer, feedback law, logging: every ``feedback_every`` ticks (200 Hz)
* equilibrium refresh and NOCP solve: every ``mpc_every`` feedback ticks (100 Hz)

The steering actuator stands in for the low-level velocity loop: the commanded
rate is saturated, then followed through a first-order lag. Rear torque is
saturated and applied directly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .controllers import ControllerFault, GnmsError, OcpConfig, make_controller
from .dynamics import N_D, N_X, DomainError, RobotParams
from .equilibrium import Reference, track_stand_equilibrium
from .observer import ObserverConfig, ObserverNumericalError, measure

LOG_COLUMNS = (
    ["t"]
    + ["s", "v_r", "delta", "phi", "phi_dot"]
    + ["tau_r", "delta_dot"]
    + ["d_r", "d_phi"]
    + ["est_s", "est_v_r", "est_delta", "est_phi", "est_phi_dot", "est_d_r", "est_d_phi"]
    + ["eq_phi", "eq_tau_r", "eq_delta_dot"]
    + ["ref_s", "ref_delta"]
    + ["mpc_iterations", "mpc_cost", "mpc_step_norm"]
)
COL = {name: i for i, name in enumerate(LOG_COLUMNS)}


@dataclass(frozen=True)
class HarnessConfig:
    plant_dt: float = 0.001
    feedback_every: int = 5
    mpc_every: int = 2
    tau_max: float = 3.0
    delta_dot_max: float = 6.0
    steer_time_constant: float = 0.02
    fall_threshold: float = math.pi / 4
    eval_start: float = 2.0
    ref_time_constant: float = 0.5
    delta_ref: float = 0.3
    sensor_noise: tuple | None = None  # per-channel std of [s, v_r, delta, phi]
    state_source: str = "observer"

    def __post_init__(self) -> None:
        if not self.plant_dt > 0 or self.feedback_every < 1 or self.mpc_every < 1:
            raise ValueError("invalid harness rates")
        if not (self.tau_max > 0 and self.delta_dot_max > 0 and self.steer_time_constant >= 0):
            raise ValueError("actuator limits must be positive")

    @property
    def feedback_dt(self) -> float:
        return self.plant_dt * self.feedback_every

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["sensor_noise"] is not None:
            out["sensor_noise"] = list(out["sensor_noise"])
        return out


@dataclass
class Scenario:
    name: str
    duration: float
    disturbance: Callable[[float], np.ndarray]
    reference: Callable[[float], Reference]
    x0: np.ndarray
    seed: int = 0
    description: str = ""
    metadata: dict = field(default_factory=dict)


@dataclass
class Metrics:
    rmse_position: float
    mae_position: float
    rmse_steering: float
    mae_steering: float
    max_abs_position_error: float
    max_roll: float
    balance_maintained: bool
    failure: str | None = None
    failure_time: float | None = None
    final_position_error: float = math.nan
    final_steering_error: float = math.nan
    window: tuple = (0.0, 0.0)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window"] = list(self.window)
        return out


@dataclass
class RunLog:
    data: np.ndarray  # (rows, len(LOG_COLUMNS))
    scenario: str = ""
    controller: str = ""
    seed: int = 0
    failure: str | None = None
    failure_time: float | None = None

    def column(self, name: str) -> np.ndarray:
        return self.data[:, COL[name]]

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.data:
            writer.writerow([f"{v:.9g}" for v in row])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


# -- profiles ------------------------------------------------------------

def inclined_plane_profile(direction: str, max_angle: float, ramp_rate: float,
                           params: RobotParams, start: float = 0.0) -> Callable[[float], np.ndarray]:
    """Board tilt ramping from ``start`` at ``ramp_rate`` up to ``max_angle``, then held.

    A lateral tilt becomes a roll torque ``m g h sin(theta)``; a longitudinal tilt
    becomes a rear-wheel torque ``-m g r sin(theta)``.
    """
    if not 0.0 <= max_angle < math.pi / 6:
        raise ValueError("max_angle must lie in [0, pi/6)")
    if not ramp_rate > 0:
        raise ValueError("ramp_rate must be positive")
    if direction not in ("lateral", "longitudinal"):
        raise ValueError(f"direction must be 'lateral' or 'longitudinal', got {direction!r}")
    mg = params.m * params.g

    def tilt(t: float) -> float:
        return min(max(t - start, 0.0) * ramp_rate, max_angle)

    if direction == "lateral":
        return lambda t: np.array([0.0, mg * params.h * math.sin(tilt(t))])
    return lambda t: np.array([-mg * params.r * math.sin(tilt(t)), 0.0])


REAR_TRACKING_SWITCH_PERIOD = 16.0
REAR_TRACKING_LEVELS = (0.0, 0.15, 0.0, -0.15, 0.0)


def rear_position_reference(t: float, time_constant: float = 0.5,
                            delta_ref: float = 0.3) -> Reference:
    """Step sequence 0 -> 0.15 -> 0 -> -0.15 -> 0 m, switching every 16 s, low-pass filtered."""
    if t < 0:
        raise ValueError("t must be non-negative")
    s = 0.0
    for j in range(1, len(REAR_TRACKING_LEVELS)):
        t_j = j * REAR_TRACKING_SWITCH_PERIOD
        if t < t_j:
            break
        jump = REAR_TRACKING_LEVELS[j] - REAR_TRACKING_LEVELS[j - 1]
        s += jump * (1.0 - math.exp(-(t - t_j) / time_constant)) if time_constant > 0 else jump
    return Reference(s_ref=s, delta_ref=delta_ref)


def ramp_profile(rate: float, channel: int = 1, start: float = 0.0, offset=None) -> Callable:
    base = np.zeros(N_D) if offset is None else np.asarray(offset, dtype=float)

    def profile(t: float) -> np.ndarray:
        d = base.copy()
        d[channel] += rate * max(t - start, 0.0)
        return d

    return profile


def constant_profile(d) -> Callable[[float], np.ndarray]:
    d = np.asarray(d, dtype=float)
    return lambda t: d.copy()


def step_profile(before, after, t_step: float) -> Callable[[float], np.ndarray]:
    before = np.asarray(before, dtype=float)
    after = np.asarray(after, dtype=float)
    return lambda t: (after if t >= t_step else before).copy()


# -- scenarios -----------------------------------------------------------

def _equilibrium_state(params, delta_ref, d=(0.0, 0.0), s=0.0):
    return track_stand_equilibrium(Reference(s, delta_ref), np.asarray(d, dtype=float), params).x_e


def constant_disturbance_scenario(params: RobotParams, harness: HarnessConfig, seed: int = 0,
                                  d=(0.05, 0.2), roll_offset: float = 0.05,
                                  duration: float = 10.0) -> Scenario:
    d = np.asarray(d, dtype=float)
    x0 = _equilibrium_state(params, harness.delta_ref, d)
    x0[3] += roll_offset
    ref = Reference(0.0, harness.delta_ref)
    return Scenario(
        name="constant-disturbance", duration=duration, disturbance=constant_profile(d),
        reference=lambda t: ref, x0=x0, seed=seed,
        description=f"constant d={d.tolist()} from a {roll_offset} rad roll offset",
        metadata={"d": d.tolist(), "roll_offset": roll_offset})


# default (max tilt, ramp rate) per direction, degrees and degrees per second
INCLINE_DEFAULTS = {"lateral": (2.8, 0.1), "longitudinal": (13.0, 0.5)}


def incline_scenario(direction: str, params: RobotParams, harness: HarnessConfig, seed: int = 0,
                     max_angle: float | None = None, ramp_rate: float | None = None,
                     settle: float = 2.0, hold: float = 5.0, name: str | None = None) -> Scenario:
    """Track stand on a board tilted slowly up to ``max_angle`` and then held.

    The slow lateral default keeps the observer's ramp lag small: the roll
    channel is the mismatched one, and its steady lag error scales with the
    ramp rate.
    """
    if direction not in INCLINE_DEFAULTS:
        raise ValueError(f"direction must be 'lateral' or 'longitudinal', got {direction!r}")
    deg, rate_deg = INCLINE_DEFAULTS[direction]
    max_angle = math.radians(deg) if max_angle is None else max_angle
    ramp_rate = math.radians(rate_deg) if ramp_rate is None else ramp_rate
    profile = inclined_plane_profile(direction, max_angle, ramp_rate, params, start=settle)
    duration = settle + max_angle / ramp_rate + hold
    ref = Reference(0.0, harness.delta_ref)
    return Scenario(
        name=name or f"incline-{direction}", duration=round(duration, 3), disturbance=profile,
        reference=lambda t: ref, x0=_equilibrium_state(params, harness.delta_ref), seed=seed,
        description=f"{direction} tilt ramp to {math.degrees(max_angle):.2f} deg at "
                    f"{math.degrees(ramp_rate):.2f} deg/s",
        metadata={"direction": direction, "max_angle": max_angle, "ramp_rate": ramp_rate,
                  "settle": settle})


# nominal unmodeled loads of the rear-tracking runs, and their seeded spread
REAR_TRACKING_D = (0.03, 0.2)
REAR_TRACKING_SPREAD = 0.05


def rear_tracking_scenario(params: RobotParams, harness: HarnessConfig, seed: int = 0,
                           d_nominal=REAR_TRACKING_D, spread: float = REAR_TRACKING_SPREAD,
                           duration: float = 64.0) -> Scenario:
    """Rear-position tracking under a seeded constant load.

    Each seed scales the nominal load by ``1 + spread * N(0, 1)`` per channel.
    """
    rng = np.random.default_rng(seed)
    d = np.asarray(d_nominal, dtype=float) * (1.0 + spread * rng.standard_normal(N_D))
    tc, dref = harness.ref_time_constant, harness.delta_ref
    return Scenario(
        name="rear-tracking", duration=duration, disturbance=constant_profile(d),
        reference=lambda t: rear_position_reference(t, tc, dref),
        x0=_equilibrium_state(params, dref), seed=seed,
        description="0 -> 0.15 -> 0 -> -0.15 m every 16 s under a constant load",
        metadata={"d": d.tolist()})


def ramp_scenario(params: RobotParams, harness: HarnessConfig, seed: int = 0,
                  rate: float = 0.05, duration: float = 15.0, start: float = 0.0) -> Scenario:
    ref = Reference(0.0, harness.delta_ref)
    return Scenario(
        name="ramp-roll", duration=duration, disturbance=ramp_profile(rate, 1, start),
        reference=lambda t: ref, x0=_equilibrium_state(params, harness.delta_ref), seed=seed,
        description=f"roll torque ramp {rate} N m/s", metadata={"rate": rate})


def step_scenario(params: RobotParams, harness: HarnessConfig, seed: int = 0,
                  d_after=(0.0, 0.2), t_step: float = 1.0, duration: float = 4.0) -> Scenario:
    ref = Reference(0.0, harness.delta_ref)
    return Scenario(
        name="step-roll", duration=duration,
        disturbance=step_profile(np.zeros(N_D), d_after, t_step),
        reference=lambda t: ref, x0=_equilibrium_state(params, harness.delta_ref), seed=seed,
        description=f"step to d={list(d_after)} at t={t_step}",
        metadata={"t_step": t_step, "d_after": list(d_after)})


SCENARIOS = {
    "constant-disturbance": constant_disturbance_scenario,
    "incline-lateral": lambda p, h, seed=0, **kw: incline_scenario("lateral", p, h, seed, **kw),
    "incline-longitudinal": lambda p, h, seed=0, **kw: incline_scenario("longitudinal", p, h, seed, **kw),
    "incline-lateral-steep": lambda p, h, seed=0, **kw: incline_scenario(
        "lateral", p, h, seed, **{"max_angle": math.radians(20.0), "ramp_rate": math.radians(1.0),
                                  "name": "incline-lateral-steep", **kw}),
    "rear-tracking": rear_tracking_scenario,
}


def build_scenario(name: str, params: RobotParams, harness: HarnessConfig, seed: int = 0,
                   **overrides) -> Scenario:
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}") from None
    return builder(params, harness, seed, **overrides)


# -- simulation ----------------------------------------------------------

def _eq_columns(controller) -> list:
    st = controller.state
    if st.x_e is None:
        return [math.nan] * 3
    return [float(st.x_e[3]), float(st.u_e[0]), float(st.u_e[1])]


def _mpc_columns(controller) -> list:
    law = controller.state.law
    if law is None:
        return [0.0, math.nan, math.nan]
    return [float(law.iterations), float(law.cost), float(law.step_norm)]


def run_closed_loop(scenario: Scenario, variant: str, params: RobotParams | None = None,
                    ocp: OcpConfig | None = None, observer: ObserverConfig | None = None,
                    harness: HarnessConfig | None = None) -> tuple[RunLog, Metrics]:
    """Simulate one scenario with one controller; faults end the run early and are recorded."""
    params = params or RobotParams()
    harness = harness or HarnessConfig()
    observer = observer or ObserverConfig(dt=harness.feedback_dt)
    if abs(observer.dt - harness.feedback_dt) > 1e-12:
        raise ValueError("observer dt must equal the feedback period")
    controller = make_controller(variant, params, ocp, observer, harness.delta_ref,
                                 harness.state_source)
    rng = np.random.default_rng(scenario.seed)
    noise = None if harness.sensor_noise is None else np.asarray(harness.sensor_noise, dtype=float)

    p = params.as_array()
    dt = harness.plant_dt
    steer_alpha = 1.0 if harness.steer_time_constant == 0 else 1.0 - math.exp(-dt / harness.steer_time_constant)
    n_steps = int(round(scenario.duration / dt))
    x = np.array(scenario.x0, dtype=float)
    u_applied = np.zeros(2)
    rate_actual = 0.0
    rows = []
    failure = None
    failure_time = None
    zeros2 = np.zeros(2)
    feedback_tick = 0

    for i in range(n_steps + 1):
        t = i * dt
        if i % harness.feedback_every == 0:
            y = measure(x)
            if noise is not None:
                y = y + noise * rng.standard_normal(4)
            ref = scenario.reference(t)
            replan = feedback_tick % harness.mpc_every == 0
            feedback_tick += 1
            try:
                u_cmd = controller.step(t, y, u_applied, ref, replan, x_true=x)
            except ControllerFault as exc:
                failure = "infeasible" if exc.kind == "infeasible" else f"controller fault: {exc}"
                failure_time = t
            except (GnmsError, ObserverNumericalError, DomainError) as exc:
                failure = f"solver error: {exc}"
                failure_time = t
            if failure is not None:
                break
            u_applied = np.array([
                min(max(u_cmd[0], -harness.tau_max), harness.tau_max),
                min(max(u_cmd[1], -harness.delta_dot_max), harness.delta_dot_max),
            ])
            est = controller.estimate.xbar_hat
            rows.append([t, *x, *u_applied, *scenario.disturbance(t), *est,
                         *_eq_columns(controller), ref.s_ref, ref.delta_ref,
                         *_mpc_columns(controller)])
        if i == n_steps:
            break
        rate_actual += steer_alpha * (u_applied[1] - rate_actual)
        d = np.ascontiguousarray(scenario.disturbance(t), dtype=float)
        x = _kernels.rk4(x, np.array([u_applied[0], rate_actual]), d, zeros2, p, dt, 1)
        if not np.all(np.isfinite(x)) or abs(x[2]) >= math.pi / 2 - 1e-3:
            failure, failure_time = "left model domain", t + dt
            break
        if abs(x[3]) >= harness.fall_threshold:
            failure, failure_time = "fell over", t + dt
            break

    data = np.array(rows, dtype=float).reshape(-1, len(LOG_COLUMNS))
    log = RunLog(data=data, scenario=scenario.name, controller=variant, seed=scenario.seed,
                 failure=failure, failure_time=failure_time)
    return log, compute_metrics(log, harness.eval_start)


# -- metrics -------------------------------------------------------------

def error_stats(errors: np.ndarray) -> tuple[float, float]:
    """``(rmse, mae)`` of an error sequence."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty evaluation window")
    return float(np.sqrt(np.mean(errors**2))), float(np.mean(np.abs(errors)))


def compute_metrics(log: RunLog, eval_start: float = 2.0, eval_end: float | None = None) -> Metrics:
    if log.data.shape[0] == 0:
        raise ValueError("empty run log")
    t = log.t
    mask = t >= eval_start - 1e-12
    if eval_end is not None:
        mask &= t <= eval_end + 1e-12
    if not np.any(mask):
        if log.failure is None:
            raise ValueError("empty evaluation window")
        mask = np.ones_like(t, dtype=bool)  # failed before the window opened
    e_s = (log.column("s") - log.column("ref_s"))[mask]
    e_d = (log.column("delta") - log.column("ref_delta"))[mask]
    rmse_s, mae_s = error_stats(e_s)
    rmse_d, mae_d = error_stats(e_d)
    max_roll = float(np.max(np.abs(log.column("phi"))))
    return Metrics(
        rmse_position=rmse_s, mae_position=mae_s, rmse_steering=rmse_d, mae_steering=mae_d,
        max_abs_position_error=float(np.max(np.abs(e_s))), max_roll=max_roll,
        balance_maintained=log.failure is None and max_roll < math.pi / 4,
        failure=log.failure, failure_time=log.failure_time,
        final_position_error=float(e_s[-1]), final_steering_error=float(e_d[-1]),
        window=(float(t[mask][0]), float(t[mask][-1])),
    )


METRIC_FIELDS = ("rmse_position", "mae_position", "rmse_steering", "mae_steering",
                 "max_abs_position_error", "max_roll")


def aggregate_metrics(metrics: list[Metrics]) -> dict:
    """Mean and sample standard deviation of every metric over repeated runs."""
    if not metrics:
        raise ValueError("nothing to aggregate")
    out = {"runs": len(metrics),
           "balance_maintained": sum(m.balance_maintained for m in metrics)}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(m, name) for m in metrics], dtype=float)
        out[name] = {"mean": float(np.mean(vals)),
                     "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    return out
