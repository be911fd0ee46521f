"""Convex losses and regularizers, and the EKF innovation terms they induce.

A loss ``l(y, yhat)`` that is strongly convex in ``yhat`` is fed to the EKF
through the pair ``(e, Q_y)`` with ``Q_y`` the inverse Hessian and
``e = -Q_y dl/dyhat``, both evaluated at the prior prediction. Separable
regularizers become scalar virtual measurements of the parameters with
innovation ``-psi'/psi''`` and variance ``1/psi''``.
"""

from dataclasses import dataclass

import numpy as np

from .data import as_dataset
from .errors import HessianNotPD, NotPositiveDefinite, ZeroCurvature
from .models import simulate
from .numerics import spd_solve


class Loss:
    """Base class: subclasses provide ``value``, ``grad`` and ``hess`` in ``yhat``.

    ``value`` broadcasts over leading dimensions and sums over the last one.
    """

    def value(self, y, yhat):
        raise NotImplementedError

    def grad(self, y, yhat):
        raise NotImplementedError

    def hess(self, y, yhat):
        raise NotImplementedError

    def terms(self, y, yhat):
        g = np.atleast_1d(self.grad(y, yhat))
        H = np.atleast_2d(self.hess(y, yhat))
        try:
            Q = spd_solve(H, np.eye(H.shape[0]))
        except NotPositiveDefinite as exc:
            raise HessianNotPD(f"loss Hessian is not positive definite: {exc}") from exc
        Q = 0.5 * (Q + Q.T)
        return -Q @ g, Q


class MSELoss(Loss):
    """``0.5 (y - yhat)' W (y - yhat)``; ``W`` defaults to the identity."""

    def __init__(self, W=None):
        if W is not None:
            W = np.atleast_2d(np.asarray(W, dtype=float))
            if not np.array_equal(W, W.T):
                raise ValueError("W must be symmetric")
            try:
                self._Winv = spd_solve(W, np.eye(W.shape[0]))
            except NotPositiveDefinite as exc:
                raise HessianNotPD("MSE weight W must be positive definite") from exc
            self._Winv = 0.5 * (self._Winv + self._Winv.T)
        self.W = W

    def _weight(self, n):
        return np.eye(n) if self.W is None else self.W

    def value(self, y, yhat):
        r = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
        if self.W is None:
            return 0.5 * np.sum(r * r, axis=-1)
        return 0.5 * np.einsum("...i,ij,...j->...", r, self.W, r)

    def grad(self, y, yhat):
        r = np.asarray(yhat, dtype=float) - np.asarray(y, dtype=float)
        return r if self.W is None else r @ self.W

    def hess(self, y, yhat):
        return self._weight(np.size(yhat))

    def terms(self, y, yhat):
        e = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
        Q = np.eye(e.size) if self.W is None else self._Winv
        return e, Q


class CrossEntropyLoss(Loss):
    """Modified cross-entropy for 0/1 labels, guarded by ``eps`` at the endpoints."""

    def __init__(self, eps=0.005):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)

    def value(self, y, yhat):
        y = np.asarray(y, dtype=float)
        p = np.clip(np.asarray(yhat, dtype=float), 0.0, 1.0)
        eps = self.eps
        return np.sum(-y * np.log(eps + p) - (1.0 - y) * np.log(1.0 + eps - p), axis=-1)

    def grad(self, y, yhat):
        y = np.asarray(y, dtype=float)
        p = np.clip(np.asarray(yhat, dtype=float), 0.0, 1.0)
        return -y / (self.eps + p) + (1.0 - y) / (1.0 + self.eps - p)

    def hess(self, y, yhat):
        y = np.asarray(y, dtype=float)
        p = np.clip(np.asarray(yhat, dtype=float), 0.0, 1.0)
        return np.diag(np.atleast_1d(y / (self.eps + p) ** 2 + (1.0 - y) / (1.0 + self.eps - p) ** 2))

    def terms(self, y, yhat):
        return ce_terms(self.eps, y, yhat)


class CustomLoss(Loss):
    """Loss defined by user callbacks ``value(y, yhat)``, ``grad`` and ``hess``."""

    def __init__(self, value, grad, hess):
        self._value, self._grad, self._hess = value, grad, hess

    def value(self, y, yhat):
        return self._value(y, yhat)

    def grad(self, y, yhat):
        return self._grad(y, yhat)

    def hess(self, y, yhat):
        return self._hess(y, yhat)


def loss_terms(loss, y, yhat):
    """Innovation ``e`` and covariance ``Q_y`` equivalent to minimizing ``loss``."""
    return loss.terms(np.atleast_1d(y), np.atleast_1d(yhat))


def ce_terms(eps, y, yhat):
    """Closed-form ``(e, Q_y)`` for the modified cross-entropy loss.

    ``e = (1 + 2 eps) y + yhat - 1 - eps`` and ``Q_y`` is diagonal with
    ``(eps + yhat)^2`` for positive labels and ``(1 + eps - yhat)^2`` otherwise.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    p = np.clip(np.atleast_1d(np.asarray(yhat, dtype=float)), 0.0, 1.0)
    e = (1.0 + 2.0 * eps) * y + p - 1.0 - eps
    if np.all((y == 0.0) | (y == 1.0)):
        q = np.where(y == 1.0, (eps + p) ** 2, (1.0 + eps - p) ** 2)
    else:
        q = 1.0 / (y / (eps + p) ** 2 + (1.0 - y) / (1.0 + eps - p) ** 2)
        e = -q * (-y / (eps + p) + (1.0 - y) / (1.0 + eps - p))
    return e, np.diag(q)


@dataclass(frozen=True)
class L2Reg:
    """``rho_theta/2 ||theta||^2 + rho_x/2 ||x0||^2``."""

    rho_theta: float = 0.0
    rho_x: float = 0.0

    def __post_init__(self):
        if self.rho_theta < 0 or self.rho_x < 0:
            raise ValueError("l2 weights must be nonnegative")


@dataclass(frozen=True)
class L1Reg:
    """``lam ||theta||_1``; handled by dedicated EKF updates, not as a Psi term."""

    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


class SeparablePsi:
    """``Psi(theta) = sum_i psi_i(theta_i)`` from elementwise callbacks.

    Each callback receives the whole parameter vector and returns one value
    per entry, so index-dependent ``psi_i`` are expressed by the callback.
    """

    def __init__(self, psi, d1, d2):
        self.psi, self.d1, self.d2 = psi, d1, d2

    @classmethod
    def quadratic(cls, rho):
        """``psi(t) = rho t^2 / 2``."""
        rho = float(rho)
        return cls(
            lambda t: 0.5 * rho * np.asarray(t, dtype=float) ** 2,
            lambda t: rho * np.asarray(t, dtype=float),
            lambda t: np.full(np.shape(t), rho),
        )

    def value(self, theta):
        return float(np.sum(self.psi(np.asarray(theta, dtype=float))))

    def grad(self, theta):
        return np.asarray(self.d1(np.asarray(theta, dtype=float)), dtype=float)


def reg_scalar_terms(psi, theta_i):
    """``(-psi'/psi'', 1/psi'')`` at ``theta_i`` (scalar or elementwise)."""
    t = np.asarray(theta_i, dtype=float)
    d1 = np.asarray(psi.d1(t), dtype=float)
    d2 = np.asarray(psi.d2(t), dtype=float)
    if np.any(~(d2 > 0.0)):
        raise ZeroCurvature(f"psi'' must be positive, got {d2}")
    e = -d1 / d2
    q = 1.0 / d2
    if e.ndim == 0:
        return float(e), float(q)
    return e, q


def rho_theta(regs):
    return sum(r.rho_theta for r in regs if isinstance(r, L2Reg))


def rho_x(regs):
    return sum(r.rho_x for r in regs if isinstance(r, L2Reg))


def l1_weight(regs):
    return sum(r.lam for r in regs if isinstance(r, L1Reg))


def psi_terms(regs):
    return [r for r in regs if isinstance(r, SeparablePsi)]


def theta_reg_value(regs, theta):
    theta = np.asarray(theta, dtype=float)
    v = 0.5 * rho_theta(regs) * float(theta @ theta)
    v += l1_weight(regs) * float(np.sum(np.abs(theta)))
    v += sum(p.value(theta) for p in psi_terms(regs))
    return v


def theta_reg_grad(regs, theta):
    """Gradient of the smooth parameter regularizers (l1 is rejected)."""
    if l1_weight(regs) > 0:
        raise ValueError("l1 regularization is not differentiable; use the EKF trainer")
    g = rho_theta(regs) * np.asarray(theta, dtype=float)
    for p in psi_terms(regs):
        g = g + p.grad(theta)
    return g


def x0_reg_value(regs, x0):
    x0 = np.asarray(x0, dtype=float)
    return 0.5 * rho_x(regs) * np.sum(x0 * x0, axis=-1)


def x0_reg_grad(regs, x0):
    return rho_x(regs) * np.asarray(x0, dtype=float)


def eval_objective(loss, regs, dataset, spec, theta, x0):
    """Training objective: parameter regularizers plus, per experiment,
    ``r_x(x0) + mean_k loss(y(k), yhat(k))`` along the open-loop simulation."""
    ds = as_dataset(dataset)
    x0s = _per_experiment(x0, ds.n_experiments, spec.n_x)
    V = theta_reg_value(regs, theta)
    for (U, Y), x0d in zip(ds.experiments, x0s):
        _, Yhat = simulate(spec, theta, x0d, U)
        V += float(x0_reg_value(regs, x0d)) + float(np.mean(loss.value(Y, Yhat)))
    return V


def _per_experiment(x0, n_exp, n_x):
    if x0 is None:
        return [np.zeros(n_x)] * n_exp
    if isinstance(x0, (list, tuple)):
        if len(x0) != n_exp:
            raise ValueError(f"need {n_exp} initial states, got {len(x0)}")
        return [np.asarray(x, dtype=float) for x in x0]
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        return list(x0)
    if n_exp != 1:
        raise ValueError(f"need {n_exp} initial states, got one")
    return [x0]
