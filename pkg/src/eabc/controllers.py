"""Regulation controllers: multiple-shooting nonlinear MPC and the four variants.

All variants share one pipeline, run at the feedback rate::

    measurement -> observer -> (every other tick) target + NOCP solve -> feedback law

and differ only in the target they regulate to and the model they predict with:

========  ==========================================  ======================
variant   target equilibrium                          prediction model
========  ==========================================  ======================
eabc      nonlinear disturbed equilibrium (closed      f + G_u u + G_d d_hat
          form, refreshed from every new d_hat)
ecbc      equilibrium of the model linearized once     f + G_u u + G_d d_hat
          at the undisturbed operating point
impc      undisturbed equilibrium, states augmented   f + G_u u, plus
          with integrated output error                 integrators
mpc       undisturbed equilibrium                      f + G_u u
========  ==========================================  ======================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_discrete_are

from . import _kernels
from .dynamics import N_U, N_X, RobotParams, linearize
from .equilibrium import (
    C_O,
    InfeasibleEquilibriumError,
    Reference,
    track_stand_equilibrium,
)
from .observer import (
    N_D,
    ExtendedEstimate,
    ObserverConfig,
    initial_estimate,
    observer_step,
)

VARIANTS = ("eabc", "ecbc", "impc", "mpc")


class GnmsError(RuntimeError):
    """The NOCP solve failed (non-finite cost, diverging rollout, indefinite Hessian)."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


class ControllerFault(RuntimeError):
    """The controller cannot produce a command (e.g. no equilibrium exists)."""

    def __init__(self, message: str, kind: str = "fault"):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class OcpConfig:
    horizon: float = 1.0
    N: int = 20
    substeps: int = 5
    Q: np.ndarray = field(default_factory=lambda: np.diag([50.0, 1.0, 20.0, 100.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.5]))
    H: np.ndarray | None = None  # None: infinite-horizon Riccati solution at the nominal equilibrium
    max_gnms_iters: int = 10
    tol: float = 1e-6
    defect_penalty: float = 1.0  # floor; raised to dominate the costate estimates
    integrator_weight: float = 10.0
    integrator_bound: float = 1.0

    def __post_init__(self) -> None:
        for name in ("Q", "R", "H"):
            val = getattr(self, name)
            if val is None:
                continue
            M = np.asarray(val, dtype=float)
            if M.ndim == 1:
                M = np.diag(M)
            object.__setattr__(self, name, M)
        Q, R = self.Q, self.R
        if Q.shape != (N_X, N_X) or R.shape != (N_U, N_U):
            raise ValueError("Q must be 5x5 and R 2x2")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ValueError("R must be positive definite")
        if self.H is not None and np.min(np.linalg.eigvalsh(self.H)) < -1e-12:
            raise ValueError("H must be positive semidefinite")
        if self.N < 2 or not self.horizon > 0 or self.substeps < 1:
            raise ValueError("need N >= 2, horizon > 0, substeps >= 1")
        if self.max_gnms_iters < 1 or not self.tol > 0:
            raise ValueError("max_gnms_iters must be >= 1 and tol > 0")

    @property
    def node_dt(self) -> float:
        return self.horizon / self.N

    def to_dict(self) -> dict:
        def mat(M):
            if M is None:
                return None
            return np.diag(M).tolist() if np.array_equal(M, np.diag(np.diag(M))) else M.tolist()

        return {
            "horizon": self.horizon, "N": self.N, "substeps": self.substeps,
            "Q": mat(self.Q), "R": mat(self.R), "H": mat(self.H),
            "max_gnms_iters": self.max_gnms_iters, "tol": self.tol,
            "defect_penalty": self.defect_penalty,
            "integrator_weight": self.integrator_weight,
            "integrator_bound": self.integrator_bound,
        }


@dataclass
class ControlLaw:
    """Feedforward plus time-varying feedback about a nominal trajectory.

    Node ``k`` covers ``[t0 + k dt, t0 + (k+1) dt)``; inputs are held over a node.
    """

    u_ff: np.ndarray  # (N, 2)
    K: np.ndarray  # (N, 2, n)
    x_nom: np.ndarray  # (N+1, n)
    times: np.ndarray  # (N+1,)
    cost: float = 0.0
    iterations: int = 0
    step_norm: float = 0.0
    converged: bool = True
    merit_trace: list = field(default_factory=list)  # merit at the start of every iteration

    def _locate(self, t: float) -> tuple[int, float]:
        dt = self.times[1] - self.times[0]
        tau = (t - self.times[0]) / dt
        k = int(min(max(math.floor(tau + 1e-9), 0), len(self.u_ff) - 1))
        return k, min(max(tau - k, 0.0), 1.0)

    def nominal_state(self, t: float) -> np.ndarray:
        k, frac = self._locate(t)
        return (1.0 - frac) * self.x_nom[k] + frac * self.x_nom[k + 1]

    def evaluate(self, x, t: float | None = None) -> np.ndarray:
        """``u = u_ff(t) + K(t) (x - x_nom(t))``; defaults to the first node."""
        t = self.times[0] if t is None else t
        k, _ = self._locate(t)
        return self.u_ff[k] + self.K[k] @ (np.asarray(x, dtype=float) - self.nominal_state(t))

    def shifted(self, t: float, n_nodes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Warm start for a solve starting at ``t``: the trajectory re-sampled on the new grid.

        Samples beyond the stored horizon repeat the last node.
        """
        N = len(self.u_ff) if n_nodes is None else n_nodes
        dt = self.times[1] - self.times[0]
        X = np.empty((N + 1, self.x_nom.shape[1]))
        U = np.empty((N, self.u_ff.shape[1]))
        for j in range(N + 1):
            tj = t + j * dt
            if tj >= self.times[-1]:
                X[j] = self.x_nom[-1]
            else:
                X[j] = self.nominal_state(tj)
            if j < N:
                U[j] = self.u_ff[self._locate(tj)[0]] if tj < self.times[-1] else self.u_ff[-1]
        return X, U


def discretize(x, u, d, params: RobotParams, dt: float, substeps: int,
               y_ref=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 transition over ``dt`` with its exact Jacobians ``(x_next, A_d, B_d)``."""
    x = np.ascontiguousarray(x, dtype=float)
    n = x.shape[0]
    Ad = np.zeros((n, n))
    Bd = np.zeros((n, N_U))
    yref = np.zeros(2) if y_ref is None else np.asarray(y_ref, dtype=float)
    xn = _kernels.rk4_sens(x, np.ascontiguousarray(u, dtype=float),
                           np.ascontiguousarray(d, dtype=float), yref,
                           params.as_array(), dt / substeps, substeps, Ad, Bd)
    return xn, Ad, Bd


def terminal_weight(x_e, u_e, d, Q: np.ndarray, R: np.ndarray, ocp: OcpConfig,
                    params: RobotParams, y_ref=None) -> np.ndarray:
    """Infinite-horizon cost-to-go of the discretized model linearized at ``(x_e, u_e)``."""
    _, Ad, Bd = discretize(x_e, u_e, d, params, ocp.node_dt, ocp.substeps, y_ref)
    P = solve_discrete_are(Ad, Bd, Q * ocp.node_dt, R * ocp.node_dt)
    return 0.5 * (P + P.T)


def gnms_solve(x0, x_e, u_e, d_hat, ocp: OcpConfig, params: RobotParams,
               warm_start: tuple[np.ndarray, np.ndarray] | None = None, *,
               t0: float = 0.0, Q: np.ndarray | None = None, H: np.ndarray | None = None,
               y_ref=None, transition=None) -> ControlLaw:
    """Gauss-Newton multiple shooting on the receding-horizon NOCP.

    Minimizes ``sum_k dt (|x_k - x_e|_Q^2 + |u_k - u_e|_R^2) + |x_N - x_e|_H^2``
    subject to the RK4-discretized dynamics with the disturbance held at
    ``d_hat`` and ``x_0 = x0``. Each iteration shoots every interval
    independently, solves the LQ subproblem with a Riccati sweep, and takes a
    line-searched step on ``cost + defect_penalty * sum |defects|``. The gains
    returned are from the sweep at the final iterate.

    ``Q``/``H`` override the config weights (the integrator-augmented model has
    7 states); ``y_ref`` feeds the integrator rows. ``transition``, if given,
    replaces the RK4 shooting: ``transition(X, U) -> (F, A, B)`` maps the node
    states ``X[:-1]`` and inputs to end states and their Jacobians.

    Raises:
        GnmsError: non-finite rollout or cost, or an indefinite Hessian that
            regularization could not fix.
    """
    x0 = np.asarray(x0, dtype=float)
    x_e = np.asarray(x_e, dtype=float)
    u_e = np.asarray(u_e, dtype=float)
    d = np.ascontiguousarray(d_hat, dtype=float)
    n = x0.shape[0]
    N = ocp.N
    dt = ocp.node_dt
    h = dt / ocp.substeps
    Q = ocp.Q if Q is None else np.asarray(Q, dtype=float)
    R = ocp.R
    if H is None:
        H = ocp.H if ocp.H is not None else terminal_weight(x_e, u_e, d, Q, R, ocp, params, y_ref)
    H = np.asarray(H, dtype=float)
    yref = np.zeros(2) if y_ref is None else np.asarray(y_ref, dtype=float)
    p = params.as_array()

    if warm_start is None:
        X = np.tile(x0, (N + 1, 1))
        U = np.tile(u_e, (N, 1))
    else:
        X = np.array(warm_start[0], dtype=float)
        U = np.array(warm_start[1], dtype=float)
    X[0] = x0

    Fx = np.empty((N, n))
    Ad = np.empty((N, n, n))
    Bd = np.empty((N, n, N_U))
    K = np.zeros((N, N_U, n))
    kff = np.zeros((N, N_U))
    dX = np.zeros((N + 1, n))
    dU = np.zeros((N, N_U))
    Ftrial = np.empty((N, n))
    lam = np.zeros((N + 1, n))
    penalty = ocp.defect_penalty

    if transition is None:
        def shoot(X_, U_, F_, with_jac):
            if with_jac:
                _kernels.discretize_nodes(X_, U_, d, yref, p, h, ocp.substeps, F_, Ad, Bd)
            else:
                _kernels.shoot_nodes(X_, U_, d, yref, p, h, ocp.substeps, F_)
    else:
        def shoot(X_, U_, F_, with_jac):
            F_new, A_new, B_new = transition(X_[:-1], U_)
            F_[:] = F_new
            if with_jac:
                Ad[:] = A_new
                Bd[:] = B_new

    def merit(X_, U_, F_):
        if not (np.all(np.isfinite(F_)) and np.all(np.isfinite(X_))):
            return math.inf, math.inf
        J = _kernels.stage_cost(X_, U_, x_e, u_e, Q, R, H, dt)
        defects = float(np.sum(np.abs(F_ - X_[1:])))
        return J + penalty * defects, J

    trace: list = []
    iterations = 0
    step_norm = math.inf
    converged = False
    for _ in range(ocp.max_gnms_iters + 1):
        shoot(X, U, Fx, True)
        if not np.all(np.isfinite(Fx)):
            raise GnmsError("non-finite rollout", trace)
        mu = 0.0
        while not _kernels.riccati_pass(X, U, Fx, Ad, Bd, x0, x_e, u_e, Q, R, H, dt, mu,
                                        K, kff, dX, dU, lam):
            mu = 1e-8 if mu == 0.0 else mu * 100.0
            if mu > 1e6:
                raise GnmsError("Riccati recursion: Hessian not positive definite", trace)
        # the LQ model is half the cost, so the defect multipliers are 2 * lam
        penalty = max(penalty, 2.5 * float(np.max(np.abs(lam))))
        m0, J0 = merit(X, U, Fx)
        if not math.isfinite(m0):
            raise GnmsError("non-finite cost", trace)
        trace.append(m0)
        step_norm = float(max(np.max(np.abs(dU)), np.max(np.abs(dX))))
        if step_norm < ocp.tol:
            converged = True
            break
        if iterations == ocp.max_gnms_iters:
            break
        alpha = 1.0
        accepted = False
        while alpha > 1e-4:
            Xn = X + alpha * dX
            Un = U + alpha * dU
            shoot(Xn, Un, Ftrial, False)
            m1, _ = merit(Xn, Un, Ftrial)
            if m1 < m0:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no descent left along the GN direction; keep the current iterate
            converged = step_norm < 1e3 * ocp.tol
            break
        X, U = Xn, Un
        iterations += 1

    return ControlLaw(
        u_ff=U.copy(), K=K.copy(), x_nom=X.copy(),
        times=t0 + dt * np.arange(N + 1), cost=J0, iterations=iterations,
        step_norm=step_norm, converged=converged, merit_trace=trace,
    )


def linear_equilibrium(lin, reference: Reference, x_lin: np.ndarray, d_hat) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium shift of a linear model: ``A dx + B_u du + B_d d = 0``, ``C_o (x_lin + dx) = y_ref``."""
    M = np.block([[lin.A, lin.B_u], [C_O, np.zeros((2, N_U))]])
    rhs = np.concatenate([-lin.B_d @ np.asarray(d_hat, dtype=float), reference.y - C_O @ x_lin])
    try:
        z = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise ControllerFault(f"singular linear equilibrium system: {exc}") from exc
    return x_lin + z[:N_X], lin.u + z[N_X:]


@dataclass
class ControllerState:
    """Mutable per-run controller memory."""

    variant: str
    estimate: ExtendedEstimate | None = None
    law: ControlLaw | None = None
    integrator: np.ndarray = field(default_factory=lambda: np.zeros(2))
    x_e: np.ndarray | None = None
    u_e: np.ndarray | None = None
    last_solve: ControlLaw | None = None
    solves: int = 0


class TrackStandController:
    """Observer + equilibrium target + NMPC, evaluated at the feedback rate.

    Subclasses choose the regulation target and the prediction model.
    """

    variant = "base"
    uses_disturbance_estimate = False

    def __init__(self, params: RobotParams, ocp: OcpConfig | None = None,
                 observer: ObserverConfig | None = None, delta_nominal: float = 0.3,
                 state_source: str = "observer"):
        self.params = params
        self.ocp = ocp or OcpConfig()
        self.obs_cfg = observer or ObserverConfig()
        if state_source not in ("observer", "true"):
            raise ValueError("state_source must be 'observer' or 'true'")
        self.state_source = state_source
        self.delta_nominal = delta_nominal
        self.state = ControllerState(variant=self.variant)
        nominal = track_stand_equilibrium(Reference(0.0, delta_nominal), np.zeros(N_D), params)
        self.x_nominal = nominal.x_e
        self._H = self._terminal_weight()

    # -- hooks -------------------------------------------------------------
    def _terminal_weight(self) -> np.ndarray:
        if self.ocp.H is not None:
            return self.ocp.H
        return terminal_weight(self.x_nominal, np.zeros(N_U), np.zeros(N_D), self.ocp.Q,
                               self.ocp.R, self.ocp, self.params)

    def target(self, reference: Reference, d_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(x_e, u_e, d_model)``."""
        raise NotImplementedError

    def _solve(self, x_hat, reference, d_model, x_e, u_e, t, warm):
        return gnms_solve(x_hat, x_e, u_e, d_model, self.ocp, self.params, warm, t0=t, H=self._H)

    def _model_state(self, x_hat: np.ndarray) -> np.ndarray:
        return x_hat

    def _before_solve(self, y, reference: Reference, dt: float) -> None:
        pass

    # -- pipeline ----------------------------------------------------------
    @property
    def estimate(self) -> ExtendedEstimate | None:
        return self.state.estimate

    def reset(self, y0, x_hat0=None) -> None:
        x_hat0 = np.concatenate([np.asarray(y0, dtype=float), [0.0]]) if x_hat0 is None else x_hat0
        self.state = ControllerState(variant=self.variant)
        self.state.estimate = initial_estimate(x_hat0, self.obs_cfg, self.params)

    def step(self, t: float, y, u_prev, reference: Reference, replan: bool,
             x_true=None) -> np.ndarray:
        """One feedback tick: observer update, optional re-solve, law evaluation."""
        st = self.state
        if st.estimate is None:
            self.reset(y)
            st = self.state
        else:
            st.estimate = observer_step(st.estimate, u_prev, y, self.obs_cfg, self.params)
        self._before_solve(y, reference, self.obs_cfg.dt)
        x_hat = st.estimate.x_hat
        if self.state_source == "true" and x_true is not None:
            x_hat = np.asarray(x_true, dtype=float)
        x_model = self._model_state(x_hat)
        if replan or st.law is None:
            try:
                x_e, u_e, d_model = self.target(reference, st.estimate.d_hat)
            except InfeasibleEquilibriumError as exc:
                raise ControllerFault(str(exc), kind="infeasible") from exc
            warm = st.law.shifted(t) if st.law is not None else None
            try:
                st.law = self._solve(x_model, reference, d_model, x_e, u_e, t, warm)
            except GnmsError:
                # a stale warm start can poison the iteration; retry cold once
                st.law = self._solve(x_model, reference, d_model, x_e, u_e, t, None)
            st.x_e, st.u_e = x_e, u_e
            st.solves += 1
        return st.law.evaluate(x_model, t)


class EABCController(TrackStandController):
    variant = "eabc"
    uses_disturbance_estimate = True

    def target(self, reference, d_hat):
        eq = track_stand_equilibrium(reference, d_hat, self.params)
        return eq.x_e, eq.u_e, np.asarray(d_hat, dtype=float)


class ECBCController(TrackStandController):
    variant = "ecbc"
    uses_disturbance_estimate = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # linearized once, at the undisturbed operating point
        self._lin = linearize(self.x_nominal, np.zeros(N_U), np.zeros(N_D), self.params)

    def target(self, reference, d_hat):
        x_e, u_e = linear_equilibrium(self._lin, reference, self.x_nominal, d_hat)
        return x_e, u_e, np.asarray(d_hat, dtype=float)


class PlainMPCController(TrackStandController):
    variant = "mpc"

    def target(self, reference, d_hat):
        eq = track_stand_equilibrium(reference, np.zeros(N_D), self.params)
        return eq.x_e, eq.u_e, np.zeros(N_D)


class IMPCController(TrackStandController):
    """MPC on the plant augmented with the integral of the output tracking error."""

    variant = "impc"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._Q_aug = self._augmented_weight()

    def _augmented_weight(self) -> np.ndarray:
        Q = np.zeros((N_X + 2, N_X + 2))
        Q[:N_X, :N_X] = self.ocp.Q
        Q[N_X:, N_X:] = self.ocp.integrator_weight * np.eye(2)
        return Q

    def _terminal_weight(self) -> np.ndarray:
        Q_aug = self._augmented_weight()
        x_aug = np.concatenate([self.x_nominal, np.zeros(2)])
        y_ref = C_O @ self.x_nominal
        return terminal_weight(x_aug, np.zeros(N_U), np.zeros(N_D), Q_aug, self.ocp.R,
                               self.ocp, self.params, y_ref)

    def _before_solve(self, y, reference, dt):
        err = np.array([y[0] - reference.s_ref, y[2] - reference.delta_ref])
        bound = self.ocp.integrator_bound
        self.state.integrator = np.clip(self.state.integrator + dt * err, -bound, bound)

    def _model_state(self, x_hat):
        return np.concatenate([x_hat, self.state.integrator])

    def target(self, reference, d_hat):
        eq = track_stand_equilibrium(reference, np.zeros(N_D), self.params)
        return np.concatenate([eq.x_e, np.zeros(2)]), eq.u_e, np.zeros(N_D)

    def _solve(self, x_hat, reference, d_model, x_e, u_e, t, warm):
        return gnms_solve(x_hat, x_e, u_e, d_model, self.ocp, self.params, warm, t0=t,
                          Q=self._Q_aug, H=self._H, y_ref=reference.y)


CONTROLLERS = {
    "eabc": EABCController,
    "ecbc": ECBCController,
    "impc": IMPCController,
    "mpc": PlainMPCController,
}


def make_controller(variant: str, params: RobotParams, ocp: OcpConfig | None = None,
                    observer: ObserverConfig | None = None, delta_nominal: float = 0.3,
                    state_source: str = "observer") -> TrackStandController:
    try:
        cls = CONTROLLERS[variant.lower()]
    except KeyError:
        raise ValueError(f"unknown controller variant {variant!r}; choose from {VARIANTS}") from None
    return cls(params, ocp, observer, delta_nominal, state_source)


def with_weights(ocp: OcpConfig, **changes) -> OcpConfig:
    return replace(ocp, **changes)
