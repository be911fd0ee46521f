"""Joint state and parameter EKF training of recurrent models.

The filter state is ``z = [x; theta_x; theta_y]`` and every training sample
is processed as

1. measurement update with the loss-induced innovation ``(e, Q_y)``;
2. sequential scalar updates for each separable regularizer, then the
   l1 correction (P is left untouched by the latter);
3. time update through the state-update network.

Between epochs and experiments the hidden state is re-initialized by
solving the small state reconstruction problem while ``theta`` and ``P``
are carried over.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import as_dataset, score
from .errors import NonFiniteState, TrainingDiverged, ZeroRegularization
from .init_state import PswarmConfig, open_loop_predict, reconstruct_x0
from .models import init_params
from .numerics import make_rng, spd_solve, symmetrize
from .objectives import (
    L1Reg,
    L2Reg,
    MSELoss,
    eval_objective,
    l1_weight,
    loss_terms,
    psi_terms,
    reg_scalar_terms,
    rho_theta,
    rho_x,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EkfState:
    """Estimate ``z = [x; theta]``, its covariance ``P`` and a sample counter."""

    z: np.ndarray
    P: np.ndarray
    n_x: int
    k: int = 0

    @property
    def x(self):
        return self.z[:self.n_x]

    @property
    def theta(self):
        return self.z[self.n_x:]


@dataclass(frozen=True)
class EkfConfig:
    """Training settings.

    ``Qx`` and ``Qtheta`` may be scalars (times identity) or matrices.
    ``P0=None`` builds the prior covariance from the l2 weights in ``regs``;
    ``Qtheta_schedule``, when set, maps the global sample counter to a
    scalar ``Qtheta`` and overrides ``Qtheta``.
    """

    loss: object = field(default_factory=MSELoss)
    regs: tuple = ()
    Qx: object = 1e-10
    Qtheta: object = 1e-10
    P0: object = None
    l1_mode: str = "batch"
    epochs: int = 1
    zero_threshold: float = 1e-3
    n_bar: int = 100
    pswarm: PswarmConfig = None
    divergence_limit: float = 1e6
    Qtheta_schedule: object = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l1_mode not in ("batch", "sequential"):
            raise ValueError("l1_mode must be 'batch' or 'sequential'")
        object.__setattr__(self, "regs", tuple(self.regs))


def prior_covariance(rho_x, rho_theta, N, N_e, n_x, n_theta):
    """Block-diagonal ``P(0|-1)`` equivalent to the l2 regularizers.

    Diagonal entries are ``1/(N_e N rho_x)`` on the state block and
    ``1/(N_e N rho_theta)`` on the parameter block.
    """
    if N < 1 or N_e < 1:
        raise ValueError("N and N_e must be >= 1")
    if (n_x > 0 and not rho_x > 0) or (n_theta > 0 and not rho_theta > 0):
        raise ZeroRegularization("rho_x and rho_theta must be positive without an explicit P0")
    d = np.concatenate([
        np.full(n_x, 1.0 / (N_e * N * rho_x)) if n_x else np.zeros(0),
        np.full(n_theta, 1.0 / (N_e * N * rho_theta)) if n_theta else np.zeros(0),
    ])
    return np.diag(d)


def kalman_update(z, P, C, e, R):
    """Measurement update with innovation ``e`` and noise covariance ``R``.

    Returns ``(z + M e, sym((I - M C) P))`` with ``M = P C' (C P C' + R)^-1``.
    """
    D1 = P @ C.T
    S = C @ D1 + R
    M = spd_solve(S, D1.T).T
    z_new = z + M @ e
    P_new = symmetrize(P - M @ D1.T)
    return z_new, P_new


def _as_cov(Q, n):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 0:
        return float(Q) * np.eye(n)
    if Q.ndim == 1:
        return np.diag(Q)
    return Q


def measurement_update(state, spec, u, y, loss):
    """Fold one output sample into the joint estimate."""
    n_x, ntx = state.n_x, spec.n_theta_x
    x, theta = state.x, state.theta
    th_y = theta[ntx:]
    yhat, Cx, _, Cth = spec.fy_jac(x, u, th_y)
    e, Qy = loss_terms(loss, y, yhat)
    C = np.zeros((spec.n_y, state.z.size))
    C[:, :n_x] = Cx
    C[:, n_x + ntx:] = Cth
    z, P = kalman_update(state.z, state.P, C, e, Qy)
    return replace(state, z=z, P=P)


def time_update(state, spec, u, Qx, Qtheta):
    """Propagate the state through ``fx``; parameters follow a random walk."""
    n_x, ntx = state.n_x, spec.n_theta_x
    nz = state.z.size
    x, theta = state.x, state.theta
    x_new, Ax, _, Ath = spec.fx_jac(x, u, theta[:ntx])
    if not np.all(np.isfinite(x_new)):
        raise NonFiniteState("time update produced a non-finite state")
    P = state.P
    # A = [[Ax, Ath, 0], [0, I, 0], [0, 0, I]]; only the first n_x rows differ from I
    Arow = np.zeros((n_x, nz))
    Arow[:, :n_x] = Ax
    Arow[:, n_x:n_x + ntx] = Ath
    T = Arow @ P
    P_new = P.copy()
    P_new[:n_x, :n_x] = T @ Arow.T
    P_new[:n_x, n_x:] = T[:, n_x:]
    P_new[n_x:, :n_x] = T[:, n_x:].T
    P_new[:n_x, :n_x] += _as_cov(Qx, n_x)
    P_new[n_x:, n_x:] += _as_cov(Qtheta, nz - n_x)
    z = state.z.copy()
    z[:n_x] = x_new
    return replace(state, z=z, P=symmetrize(P_new), k=state.k + 1)


def reg_sequential_update(state, regs):
    """Scalar virtual-measurement updates, one per parameter and separable term."""
    n_x = state.n_x
    z, P = state.z.copy(), state.P.copy()
    for psi in psi_terms(regs):
        for i in range(z.size - n_x):
            j = n_x + i
            e, q = reg_scalar_terms(psi, z[j])
            Pj = P[:, j].copy()
            M = Pj / (P[j, j] + q)
            z = z + M * e
            P = P - np.outer(M, Pj)
    return replace(state, z=z, P=symmetrize(P))


def l1_update(state, lam, mode="batch", prior=None):
    """Shift the estimate against ``sign(theta)`` along the columns of ``P``.

    ``mode='sequential'`` walks the parameters one by one, re-reading the sign
    after each shift. ``mode='batch'`` evaluates every sign at once on the
    prior estimate ``prior`` (the state before the measurement update;
    defaults to ``state``) and uses that state's covariance. ``P`` is never
    modified.
    """
    if lam == 0:
        return state
    n_x = state.n_x
    if mode == "sequential":
        z = state.z.copy()
        P = state.P
        for i in range(z.size - n_x):
            s = np.sign(z[n_x + i])
            if s != 0.0:
                z -= lam * s * P[:, n_x + i]
        return replace(state, z=z)
    if mode == "batch":
        ref = prior if prior is not None else state
        z = state.z - lam * (ref.P[:, n_x:] @ np.sign(ref.theta))
        return replace(state, z=z)
    raise ValueError(f"unknown l1 mode {mode!r}")


def ekf_step(state, spec, u, y, config, Qtheta=None):
    """One full sample: measurement, regularization, l1, time update."""
    prior = state
    state = measurement_update(state, spec, u, y, config.loss)
    if psi_terms(config.regs):
        state = reg_sequential_update(state, config.regs)
    lam = l1_weight(config.regs)
    if lam > 0:
        state = l1_update(state, lam, config.l1_mode, prior=prior)
    Qth = config.Qtheta if Qtheta is None else Qtheta
    return time_update(state, spec, u, config.Qx, Qth)


@dataclass
class TrainResult:
    theta: np.ndarray
    x0s: list
    best_epoch: int
    log: list
    state: EkfState
    theta_last: np.ndarray


def initial_state(spec, config, theta0, N):
    n_x, nth = spec.n_x, spec.n_theta
    if config.P0 is not None:
        P0 = _as_cov(config.P0, n_x + nth)
    else:
        P0 = prior_covariance(rho_x(config.regs), rho_theta(config.regs),
                              N, config.epochs, n_x, nth)
    z0 = np.concatenate([np.zeros(n_x), np.asarray(theta0, dtype=float)])
    return EkfState(z=z0, P=symmetrize(P0), n_x=n_x)


def train(data, spec, config, rng=None, theta0=None):
    """Train ``spec`` on one or more experiments over ``config.epochs`` passes.

    Returns a :class:`TrainResult` holding the parameters of the epoch with
    the lowest training objective, the reconstructed initial states for that
    epoch, and one log row per epoch (``epoch, objective, fit,
    zero_fraction, wall_time``).
    """
    ds = as_dataset(data)
    rng = rng if rng is not None else make_rng(0)
    if theta0 is None:
        theta0 = init_params(spec, rng)
    cfg_ps = config.pswarm or PswarmConfig()
    rx = rho_x(config.regs)
    state = initial_state(spec, config, theta0, ds.n_samples)
    n_x = spec.n_x

    log = []
    best = (np.inf, None, None, -1)
    start_x0 = None
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        for d, (U, Y) in enumerate(ds.experiments):
            if epoch == 0 and d == 0:
                x_init = np.zeros(n_x)
            elif d == 0:
                x_init = start_x0
            else:
                x_init = reconstruct_x0(spec, state.theta, U, Y, config.loss, rx,
                                        config.n_bar, cfg_ps)
            z = state.z.copy()
            z[:n_x] = x_init
            state = replace(state, z=z)
            for k in range(U.shape[0]):
                Qth = None
                if config.Qtheta_schedule is not None:
                    Qth = config.Qtheta_schedule(state.k)
                try:
                    state = ekf_step(state, spec, U[k], Y[k], config, Qth)
                except ArithmeticError as exc:
                    raise TrainingDiverged(str(exc), epoch, k, d) from exc
                if not np.max(np.abs(state.z)) <= config.divergence_limit:
                    raise TrainingDiverged("estimate exceeded the divergence guard", epoch, k, d)

        theta = state.theta.copy()
        x0s, Yhats = open_loop_predict(spec, theta, ds, config.loss, rx, config.n_bar, cfg_ps)
        start_x0 = x0s[0]
        V = eval_objective(config.loss, config.regs, ds, spec, theta, x0s)
        _, fit = score(ds, Yhats)
        zf = zero_fraction(theta, config.zero_threshold)
        log.append({"epoch": epoch + 1, "objective": V, "fit": fit,
                    "zero_fraction": zf, "wall_time": time.perf_counter() - t0})
        logger.info("epoch %d: objective %.6g fit %.4g", epoch + 1, V, fit)
        if V < best[0]:
            best = (V, theta, x0s, epoch + 1)
    return TrainResult(theta=best[1], x0s=best[2], best_epoch=best[3], log=log,
                       state=state, theta_last=state.theta.copy())


def zero_fraction(theta, threshold=1e-3):
    theta = np.asarray(theta, dtype=float)
    return float(np.mean(np.abs(theta) <= threshold)) if theta.size else 0.0


def default_regs(rho_theta_=1e-3, rho_x_=1e-3, lam=0.0):
    regs = [L2Reg(rho_theta=rho_theta_, rho_x=rho_x_)]
    if lam > 0:
        regs.append(L1Reg(lam))
    return tuple(regs)
