"""Nonlinear MPC on a trained recurrent model with offset-free state estimation.

The prediction model is the trained network augmented with a constant
disturbance ``d``::

    x(k+1) = fx(x(k), u(k)) + B_d d(k)
    y(k)   = fy(x(k), u(k)) + C_d d(k)
    d(k+1) = d(k)

``(x, d)`` is estimated online by an EKF with the parameters frozen, and the
input sequence is optimized by projected gradient with exact adjoint
gradients. Everything inside the controller runs in the model's scaled
units; conversion happens at the controller boundary.
"""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Scaling
from .errors import DimensionMismatch, NonFiniteState
from .ekf import kalman_update
from .numerics import make_rng, symmetrize

logger = logging.getLogger(__name__)


def _weight(W, n):
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        return float(W) * np.eye(n)
    if W.ndim == 1:
        return np.diag(W)
    if W.shape != (n, n):
        raise DimensionMismatch(f"weight has shape {W.shape}, expected {(n, n)}")
    return W


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and input bounds, in physical units.

    ``strict_causal_skip`` drops the ``y_0 - r_0`` tracking term, which no
    decision variable can influence when the model is strictly causal. The
    input after the horizon is held at ``u_{p-1}``, so the ``u_p - u_{p-1}``
    penalty is always zero.
    """

    p: int = 10
    W_du: object = 0.1
    W_y: object = 10.0
    u_min: object = -np.inf
    u_max: object = np.inf
    strict_causal_skip: bool = False
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("horizon p must be >= 1")
        if not np.all(np.asarray(self.u_min) < np.asarray(self.u_max)):
            raise ValueError("u_min must be below u_max elementwise")
        for name in ("W_du", "W_y"):
            W = np.asarray(getattr(self, name), dtype=float)
            if W.ndim == 2:
                if not np.allclose(W, W.T) or np.min(np.linalg.eigvalsh(W)) < -1e-12:
                    raise ValueError(f"{name} must be symmetric positive semidefinite")
            elif np.any(W < 0):
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True, eq=False)
class DisturbanceModel:
    """Constant-disturbance augmentation ``(B_d, C_d)`` with random-walk covariance ``Q_d``."""

    Bd: np.ndarray
    Cd: np.ndarray
    Qd: object = 1.0

    def __post_init__(self):
        Bd = np.atleast_2d(np.asarray(self.Bd, dtype=float))
        Cd = np.atleast_2d(np.asarray(self.Cd, dtype=float))
        if Bd.shape[1] != Cd.shape[1]:
            raise DimensionMismatch("B_d and C_d need the same number of columns")
        object.__setattr__(self, "Bd", Bd)
        object.__setattr__(self, "Cd", Cd)

    @property
    def n_d(self):
        return self.Cd.shape[1]

    @classmethod
    def output(cls, n_x, n_y, Qd=1.0):
        """Pure output disturbance ``B_d = 0``, ``C_d = I``."""
        return cls(np.zeros((n_x, n_y)), np.eye(n_y), Qd)

    @classmethod
    def none(cls, n_x, n_y):
        """No augmentation (``n_d = 0``)."""
        return cls(np.zeros((n_x, 0)), np.zeros((n_y, 0)), 1.0)


def augmented_predict(spec, theta, dist, x, d, u):
    """One step of the augmented model: ``(fx + B_d d, fy + C_d d)``."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if dist.Bd.shape != (spec.n_x, d.size) or dist.Cd.shape != (spec.n_y, d.size):
        raise DimensionMismatch(
            f"disturbance model {dist.Bd.shape}/{dist.Cd.shape} does not match "
            f"n_x={spec.n_x}, n_y={spec.n_y}, n_d={d.size}")
    th_x, th_y = spec.split(theta)
    x_next = spec.fx(x, u, th_x) + dist.Bd @ d
    y = spec.fy(x, u, th_y) + dist.Cd @ d
    return x_next, y


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """Estimate of ``(x, d)`` and the joint covariance."""

    x: np.ndarray
    d: np.ndarray
    P: np.ndarray


class OffsetFreeEstimator:
    """EKF on the augmented state ``[x; d]`` with the model parameters frozen.

    Defaults are ``Q_x = 0.01 I``, ``R = 0.01 I`` and ``P(0|-1) = I``; the
    disturbance random-walk covariance comes from ``dist.Qd``.
    """

    def __init__(self, spec, theta, dist, Qx=0.01, R=0.01, P0=1.0, x0=None):
        self.spec = spec
        self.theta = np.asarray(theta, dtype=float)
        self.th_x, self.th_y = spec.split(self.theta)
        self.dist = dist
        n_x, n_d = spec.n_x, dist.n_d
        self.Qx = _weight(Qx, n_x)
        self.Qd = _weight(dist.Qd, n_d)
        self.R = _weight(R, spec.n_y)
        x0 = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float)
        self.state = EstimatorState(x0, np.zeros(n_d), _weight(P0, n_x + n_d))

    def correct(self, u, y):
        """Measurement update with output ``y`` (model units) under input ``u``."""
        st, spec, dist = self.state, self.spec, self.dist
        n_x = spec.n_x
        yhat, Cx, _, _ = spec.fy_jac(st.x, u, self.th_y)
        yhat = yhat + dist.Cd @ st.d
        C = np.hstack([Cx, dist.Cd])
        z, P = kalman_update(np.concatenate([st.x, st.d]), st.P, C,
                             np.atleast_1d(y) - yhat, self.R)
        self.state = EstimatorState(z[:n_x], z[n_x:], P)
        return self.state

    def predict(self, u):
        """Time update with the applied input ``u``."""
        st, spec, dist = self.state, self.spec, self.dist
        n_x, n_d = spec.n_x, dist.n_d
        x_next, Ax, _, _ = spec.fx_jac(st.x, u, self.th_x)
        x_next = x_next + dist.Bd @ st.d
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteState("estimator prediction is not finite")
        A = np.eye(n_x + n_d)
        A[:n_x, :n_x] = Ax
        A[:n_x, n_x:] = dist.Bd
        P = A @ st.P @ A.T
        P[:n_x, :n_x] += self.Qx
        P[n_x:, n_x:] += self.Qd
        self.state = EstimatorState(x_next, st.d.copy(), symmetrize(P))
        return self.state


def estimator_step(estimator, u, y):
    """Measurement update with ``(u, y)`` followed by the time update under ``u``.

    Returns the filtered estimate ``(x(k|k), d(k|k))``; ``estimator`` is left
    holding the one-step prediction.
    """
    filtered = estimator.correct(u, y)
    estimator.predict(u)
    return filtered


@dataclass
class MpcSolution:
    u0: np.ndarray
    U: np.ndarray
    cost: float
    iterations: int
    converged: bool


def _mpc_inputs(U, V, p):
    """Model inputs over ``t = 0..p``: decisions, held last move, measured disturbances."""
    U_eff = np.vstack([U, U[-1:]])
    if V is None:
        return U_eff
    V = np.broadcast_to(np.atleast_2d(V), (p + 1, np.atleast_2d(V).shape[-1]))
    return np.hstack([U_eff, V])


def mpc_cost_grad(U, spec, theta, dist, x0, d, u_prev, R, Wdu, Wy, skip_y0=False, V=None,
                  need_grad=True):
    """Tracking cost over ``t = 0..p`` and its gradient with respect to ``U`` (``p x n_u``).

    ``V`` holds measured disturbances appended to the model input (held
    over the horizon when given as a single row).
    """
    p, n_u = U.shape
    th_x, th_y = spec.split(theta)
    Ui = _mpc_inputs(U, V, p)
    dx = dist.Bd @ d
    dy = dist.Cd @ d
    WtW_y = Wy.T @ Wy
    WtW_du = Wdu.T @ Wdu

    dU = np.diff(np.vstack([u_prev[None, :], U]), axis=0)
    J = float(np.sum((dU @ Wdu.T) ** 2))
    x = x0
    if not need_grad:
        for t in range(p + 1):
            res = spec.fy(x, Ui[t], th_y) + dy - R[t]
            if t > 0 or not skip_y0:
                J += float(np.sum((Wy @ res) ** 2))
            if t < p:
                x = spec.fx(x, Ui[t], th_x) + dx
        return J, None

    Cxs, Cus, Axs, Aus, gys = [], [], [], [], []
    for t in range(p + 1):
        y, Cx, Cu, _ = spec.fy_jac(x, Ui[t], th_y)
        res = y + dy - R[t]
        if t > 0 or not skip_y0:
            J += float(np.sum((Wy @ res) ** 2))
            gys.append(2.0 * WtW_y @ res)
        else:
            gys.append(np.zeros(spec.n_y))
        Cxs.append(Cx)
        Cus.append(Cu[:, :n_u])
        if t < p:
            x, Ax, Au, _ = spec.fx_jac(x, Ui[t], th_x)
            x = x + dx
            Axs.append(Ax)
            Aus.append(Au[:, :n_u])

    g_eff = np.zeros((p + 1, n_u))
    lam = np.zeros(spec.n_x)
    for t in range(p, -1, -1):
        if t < p:
            g_eff[t] = Aus[t].T @ lam
            lam = Axs[t].T @ lam
        g_eff[t] += Cus[t].T @ gys[t]
        lam = lam + Cxs[t].T @ gys[t]
    G = g_eff[:p].copy()
    G[p - 1] += g_eff[p]
    gdu = 2.0 * dU @ WtW_du.T
    G += gdu
    G[:-1] -= gdu[1:]
    return J, G


def nmpc_solve(cfg, spec, theta, x0, d, u_prev, r, warm_start=None, dist=None, V=None,
               u_min=None, u_max=None, W_du=None, W_y=None):
    """Box-constrained minimization of the tracking cost by projected gradient.

    All arguments are in model units. ``u_min``, ``u_max``, ``W_du`` and
    ``W_y`` override the values in ``cfg`` (the controller passes scaled
    versions). Step sizes follow the Barzilai-Borwein rule with Armijo
    backtracking, so the cost never increases across iterations. Stops when
    the projected-gradient step falls below ``cfg.tol`` (converged) or after
    ``cfg.max_iter`` iterations (``converged=False``, best iterate returned).
    """
    n_y = spec.n_y
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    n_u = u_prev.size
    p = cfg.p
    dist = dist or DisturbanceModel.none(spec.n_x, n_y)
    d = np.atleast_1d(np.asarray(d, dtype=float)).reshape(dist.n_d)
    lo = np.broadcast_to(np.asarray(cfg.u_min if u_min is None else u_min, dtype=float), (n_u,))
    hi = np.broadcast_to(np.asarray(cfg.u_max if u_max is None else u_max, dtype=float), (n_u,))
    Wdu = _weight(cfg.W_du if W_du is None else W_du, n_u)
    Wy = _weight(cfg.W_y if W_y is None else W_y, n_y)
    R = np.broadcast_to(np.atleast_2d(np.asarray(r, dtype=float)), (p + 1, n_y))

    if warm_start is None:
        U = np.tile(u_prev, (p, 1))
    else:
        U = np.asarray(warm_start, dtype=float).reshape(p, n_u)
    U = np.clip(U, lo, hi)
    x0 = np.asarray(x0, dtype=float)

    def value_grad(U, need_grad=True):
        return mpc_cost_grad(U, spec, theta, dist, x0, d, u_prev, R, Wdu, Wy,
                             cfg.strict_causal_skip, V, need_grad)

    J, G = value_grad(U)
    alpha = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if np.max(np.abs(U - np.clip(U - G, lo, hi))) < cfg.tol:
            converged = True
            it -= 1
            break
        for _ in range(60):
            U_new = np.clip(U - alpha * G, lo, hi)
            step = U_new - U
            J_new, _ = value_grad(U_new, need_grad=False)
            if J_new <= J + 1e-4 * float(np.sum(G * step)):
                break
            alpha *= 0.5
        else:
            logger.debug("line search failed at iteration %d", it)
            break
        J_new, G_new = value_grad(U_new)
        s = (U_new - U).ravel()
        yv = (G_new - G).ravel()
        sy = float(s @ yv)
        alpha = float(s @ s) / sy if sy > 0 else 2.0 * alpha
        alpha = min(max(alpha, 1e-10), 1e10)
        U, J, G = U_new, J_new, G_new
        if not np.any(s):
            break
    return MpcSolution(u0=U[0].copy(), U=U, cost=J, iterations=it, converged=converged)


class NmpcController:
    """MPC on a trained model, converting physical units through ``scaling``.

    The tracking weights are applied to physical deviations: scaled weights
    are ``W_y diag(y_std)`` and ``W_du diag(u_std)``. ``n_mv`` leading model
    inputs are manipulated; any remaining ones are measured disturbances
    passed to :meth:`solve` and held over the horizon.
    """

    def __init__(self, spec, theta, cfg, dist=None, scaling=None, n_mv=None):
        self.spec = spec
        self.theta = np.asarray(theta, dtype=float)
        self.cfg = cfg
        self.dist = dist or DisturbanceModel.none(spec.n_x, spec.n_y)
        self.scaling = scaling or Scaling.identity(spec.n_u, spec.n_y)
        self.n_mv = spec.n_u if n_mv is None else n_mv
        sc, m = self.scaling, self.n_mv
        u_std = sc.u_std[:m]
        self.u_min = (np.broadcast_to(np.asarray(cfg.u_min, dtype=float), (m,)) - sc.u_mean[:m]) / u_std
        self.u_max = (np.broadcast_to(np.asarray(cfg.u_max, dtype=float), (m,)) - sc.u_mean[:m]) / u_std
        self.W_du = _weight(cfg.W_du, m) @ np.diag(u_std)
        self.W_y = _weight(cfg.W_y, spec.n_y) @ np.diag(sc.y_std)
        self._warm = None

    def to_model_u(self, u, v=None):
        full = np.concatenate([np.atleast_1d(u), np.atleast_1d(v) if v is not None else []])
        return self.scaling.scale_u(full)

    def solve(self, x, d, u_prev, r, v=None):
        """Optimal first move in physical units; keeps the shifted solution as warm start."""
        sc, m = self.scaling, self.n_mv
        u_prev_s = (np.atleast_1d(u_prev) - sc.u_mean[:m]) / sc.u_std[:m]
        r_s = sc.scale_y(np.atleast_2d(np.asarray(r, dtype=float)))
        V = None
        if v is not None:
            V = (np.atleast_1d(v) - sc.u_mean[m:]) / sc.u_std[m:]
        sol = nmpc_solve(self.cfg, self.spec, self.theta, x, d, u_prev_s, r_s,
                         warm_start=self._warm, dist=self.dist, V=V, u_min=self.u_min,
                         u_max=self.u_max, W_du=self.W_du, W_y=self.W_y)
        self._warm = np.vstack([sol.U[1:], sol.U[-1:]])
        sol.u0 = sol.u0 * sc.u_std[:m] + sc.u_mean[:m]
        sol.U = sol.U * sc.u_std[:m] + sc.u_mean[:m]
        return sol


class Plant:
    """Continuous-time plant ``dx/dt = g(x, u, v)``, ``y = h(x)`` sampled every ``Ts``.

    Integration is fixed-step RK4 with ``substeps`` steps per sample; the
    input and measured disturbance are held constant over a sample.
    """

    def __init__(self, g, h, x0, Ts, substeps=10, u_eq=None, v_nominal=None):
        self.g, self.h = g, h
        self.x = np.asarray(x0, dtype=float).copy()
        self.Ts = float(Ts)
        self.substeps = int(substeps)
        self.u_eq = None if u_eq is None else np.atleast_1d(np.asarray(u_eq, dtype=float))
        self.v_nominal = None if v_nominal is None else np.atleast_1d(np.asarray(v_nominal, dtype=float))

    def output(self):
        return np.atleast_1d(self.h(self.x))

    def step(self, u, v=None):
        v = self.v_nominal if v is None else np.atleast_1d(v)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        dt = self.Ts / self.substeps
        x = self.x
        for _ in range(self.substeps):
            k1 = self.g(x, u, v)
            k2 = self.g(x + 0.5 * dt * k1, u, v)
            k3 = self.g(x + 0.5 * dt * k2, u, v)
            k4 = self.g(x + dt * k3, u, v)
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("plant integration diverged")
        self.x = x
        return self.output()


# Nominal exothermic CSTR: first-order irreversible reaction A -> B with a
# cooling jacket. States are C_A [mol/L] and T [K]; the manipulated input is
# the coolant temperature T_c [K]; the measured disturbance is the feed
# concentration C_Af [mol/L]; time is in seconds.
CSTR_PARAMS = {
    "q": 100.0,        # feed flow [L/min]
    "V": 100.0,        # volume [L]
    "Tf": 350.0,       # feed temperature [K]
    "rho": 1000.0,     # density [g/L]
    "Cp": 0.239,       # heat capacity [J/(g K)]
    "dH": -5.0e4,      # reaction enthalpy [J/mol]
    "E_R": 8750.0,     # activation energy over gas constant [K]
    "k0": 7.2e10,      # pre-exponential factor [1/min]
    "UA": 5.0e4,       # heat transfer coefficient times area [J/(min K)]
}
CSTR_TC_RANGE = (280.0, 298.0)
CSTR_CAF_RANGE = (0.9, 1.1)


def cstr_plant(Ts=5.0, substeps=10, x0=None, Tc_eq=290.0, CAf=1.0, **overrides):
    """Exothermic CSTR with output ``y = T``.

    The equations are::

        dC_A/dt = [q/V (C_Af - C_A) - r] / 60
        dT/dt   = [q/V (T_f - T) - dH/(rho Cp) r + UA/(V rho Cp) (T_c - T)] / 60
        r       = k0 exp(-E_R / T) C_A

    For ``T_c`` in ``CSTR_TC_RANGE`` the low-conversion equilibrium is unique
    and stable. ``overrides`` replace entries of ``CSTR_PARAMS``, which is how
    plant-model mismatch is injected.
    """
    unknown = set(overrides) - set(CSTR_PARAMS)
    if unknown:
        raise ValueError(f"unknown CSTR parameters: {sorted(unknown)}")
    prm = {**CSTR_PARAMS, **overrides}
    q_V = prm["q"] / prm["V"]
    gain_r = -prm["dH"] / (prm["rho"] * prm["Cp"])
    gain_c = prm["UA"] / (prm["V"] * prm["rho"] * prm["Cp"])

    def g(x, u, v):
        CA, T = x
        Caf = v[0] if v is not None else CAf
        r = prm["k0"] * np.exp(-prm["E_R"] / T) * CA
        return np.array([
            q_V * (Caf - CA) - r,
            q_V * (prm["Tf"] - T) + gain_r * r + gain_c * (u[0] - T),
        ]) / 60.0

    def h(x):
        return x[1:2]

    if x0 is None:
        x0 = cstr_equilibrium(Tc_eq, CAf, g)
    return Plant(g, h, x0, Ts, substeps, u_eq=[Tc_eq], v_nominal=[CAf])


def cstr_equilibrium(Tc, CAf, g):
    """Steady state of the CSTR for coolant ``Tc`` and feed ``CAf``."""
    from scipy.optimize import fsolve

    x, _, ier, msg = fsolve(lambda x: g(x, np.array([Tc]), np.array([CAf])),
                            np.array([0.95, 310.0]), full_output=True)
    if ier != 1:
        raise RuntimeError(f"CSTR equilibrium not found: {msg}")
    return x


def collect_plant_data(plant, N, rng=None, u_range=CSTR_TC_RANGE, hold=(5, 30),
                       v_range=None, noise_std=0.0):
    """Open-loop excitation with random steps held for a random number of samples.

    Returns a :class:`Dataset` with inputs ``[u, v]`` (``v`` only when
    ``v_range`` is given) and the sampled plant outputs.
    """
    rng = rng if rng is not None else make_rng(0)
    U, Y = [], []
    k = 0
    while k < N:
        n_hold = int(rng.integers(hold[0], hold[1] + 1))
        u = rng.uniform(*u_range)
        v = rng.uniform(*v_range) if v_range is not None else None
        for _ in range(min(n_hold, N - k)):
            y = plant.output() + noise_std * rng.standard_normal(plant.output().size)
            U.append([u] if v is None else [u, v])
            Y.append(y)
            plant.step([u], None if v is None else [v])
            k += 1
    return Dataset.from_arrays(np.array(U), np.array(Y), Ts=plant.Ts)


TRAJECTORY_COLUMNS = ("step", "time", "r", "y", "u", "d_hat", "solver_iters", "solve_ms")


@dataclass
class ClosedLoopLog:
    rows: list = field(default_factory=list)
    error: str = None

    def column(self, name):
        return np.array([row[name] for row in self.rows])


def closed_loop_sim(plant, controller, estimator, reference, K, u_init=None, v=None,
                    noise_std=0.0, rng=None):
    """Simulate ``K`` sampling steps of the estimator, controller and plant loop.

    Each step measures ``y``, corrects the estimate with the previously
    applied input, solves the MPC problem, applies the first move, and
    propagates the estimator with it. ``reference(k)`` and ``v(k)`` give the
    set-point and measured disturbance at step ``k``. ``u_init`` (the input
    before step 0) defaults to the plant's equilibrium input or the midpoint
    of the bounds. On failure the log is truncated and the error recorded.
    """
    rng = rng if rng is not None else make_rng(0)
    cfg = controller.cfg
    if u_init is None:
        if plant.u_eq is not None:
            u_init = plant.u_eq
        else:
            u_init = 0.5 * (np.asarray(cfg.u_min, dtype=float) + np.asarray(cfg.u_max, dtype=float))
    u_prev = np.atleast_1d(np.asarray(u_init, dtype=float))
    sc = controller.scaling
    log = ClosedLoopLog()
    try:
        for k in range(K):
            r = np.atleast_1d(reference(k))
            vk = None if v is None else np.atleast_1d(v(k))
            y = plant.output()
            if noise_std:
                y = y + noise_std * rng.standard_normal(y.size)
            est = estimator.correct(controller.to_model_u(u_prev, vk), sc.scale_y(y))
            t0 = time.perf_counter()
            sol = controller.solve(est.x, est.d, u_prev, r, vk)
            solve_ms = 1e3 * (time.perf_counter() - t0)
            u = sol.u0
            estimator.predict(controller.to_model_u(u, vk))
            log.rows.append({
                "step": k, "time": k * plant.Ts, "r": r.copy(), "y": y.copy(), "u": u.copy(),
                "d_hat": est.d.copy(), "solver_iters": sol.iterations, "solve_ms": solve_ms,
            })
            plant.step(u, vk)
            u_prev = u
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error = f"step {len(log.rows)}: {exc}"
        logger.error("closed loop stopped at %s", log.error)
    return log


def save_trajectory_csv(log, path):
    """Write one row per step; vector entries are spread over indexed columns."""
    if not log.rows:
        header = list(TRAJECTORY_COLUMNS)
        rows = []
    else:
        first = log.rows[0]
        header = []
        for name in TRAJECTORY_COLUMNS:
            val = first[name]
            if isinstance(val, np.ndarray):
                header += [name] if val.size == 1 else [f"{name}{i}" for i in range(val.size)]
            else:
                header.append(name)
        rows = []
        for row in log.rows:
            out = []
            for name in TRAJECTORY_COLUMNS:
                val = row[name]
                out += [repr(float(x)) for x in np.ravel(val)] if isinstance(val, np.ndarray) else [val]
            rows.append(out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def steady_state_offset(log, last=10):
    """Largest ``|y - r|`` over the final ``last`` logged steps."""
    y = log.column("y")[-last:]
    r = log.column("r")[-last:]
    return float(np.max(np.abs(y - r)))
