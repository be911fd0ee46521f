"""Initial-state reconstruction by a bounded particle swarm.

This is a plain particle swarm with constriction coefficients and velocity
clamping; no pattern-search polishing is performed.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import as_dataset
from .errors import NonFiniteEvaluation
from .models import simulate
from .objectives import MSELoss

logger = logging.getLogger(__name__)

_BIG = 1e300


@dataclass(frozen=True)
class PswarmConfig:
    """Swarm settings; ``None`` sizes default to ``2 n`` particles and ``50 n`` iterations."""

    pop_size: int = None
    lower: float = -3.0
    upper: float = 3.0
    max_iter: int = None
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    seed: int = 0
    tol: float = 1e-12

    def __post_init__(self):
        if self.pop_size is not None and self.pop_size < 2:
            raise ValueError("pop_size must be at least 2")
        if not np.all(np.asarray(self.lower) < np.asarray(self.upper)):
            raise ValueError("bounds must satisfy lower < upper")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")


def pswarm_minimize(f, n, cfg=None, vectorized=False):
    """Minimize ``f`` over the box ``[cfg.lower, cfg.upper]^n``.

    Parameters
    ----------
    f : callable
        Objective. With ``vectorized=True`` it maps a ``(P, n)`` array of
        particles to ``P`` values, otherwise one point to a scalar.
    n : int
        Number of variables.
    cfg : PswarmConfig

    Returns
    -------
    x_best, f_best
    """
    cfg = cfg or PswarmConfig()
    if n == 0:
        x = np.zeros(0)
        val = f(x[None, :])[0] if vectorized else f(x)
        return x, float(val)

    def evaluate(X):
        vals = np.asarray(f(X) if vectorized else [f(x) for x in X], dtype=float).reshape(-1)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteEvaluation("swarm objective returned a non-finite value")
        return vals

    rng = np.random.default_rng(cfg.seed)
    lo = np.broadcast_to(np.asarray(cfg.lower, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(cfg.upper, dtype=float), (n,))
    pop = cfg.pop_size or max(2, 2 * n)
    iters = cfg.max_iter if cfg.max_iter is not None else 50 * n
    vmax = 0.5 * (hi - lo)

    X = rng.uniform(lo, hi, size=(pop, n))
    X[0] = np.clip(0.0, lo, hi)  # the origin is always a candidate
    V = rng.uniform(-vmax, vmax, size=(pop, n))
    F = evaluate(X)
    pbest, pbest_f = X.copy(), F.copy()
    g = int(np.argmin(F))
    gbest, gbest_f = X[g].copy(), F[g]

    for _ in range(iters):
        r1 = rng.uniform(size=(pop, n))
        r2 = rng.uniform(size=(pop, n))
        V = (cfg.inertia * V + cfg.cognitive * r1 * (pbest - X)
             + cfg.social * r2 * (gbest - X))
        V = np.clip(V, -vmax, vmax)
        X = np.clip(X + V, lo, hi)
        F = evaluate(X)
        better = F < pbest_f
        pbest[better] = X[better]
        pbest_f[better] = F[better]
        g = int(np.argmin(pbest_f))
        if pbest_f[g] < gbest_f:
            gbest, gbest_f = pbest[g].copy(), pbest_f[g]
        if np.max(np.abs(V)) < cfg.tol and np.ptp(X, axis=0).max() < cfg.tol:
            break
    return gbest, float(gbest_f)


def reconstruct_x0(spec, theta, U, Y, loss=None, rho_x=0.0, n_bar=100, cfg=None):
    """Initial state minimizing ``rho_x/2 ||x0||^2 + mean loss`` over the first
    ``n_bar`` samples of ``(U, Y)``."""
    loss = loss or MSELoss()
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    N = U.shape[0]
    if n_bar > N:
        logger.warning("n_bar=%d exceeds the %d available samples; clamped", n_bar, N)
        n_bar = N
    if n_bar < 1:
        raise ValueError("n_bar must be at least 1")
    Ub, Yb = U[:n_bar], Y[:n_bar]

    def objective(X0):
        with np.errstate(all="ignore"):
            _, Yhat = simulate(spec, theta, X0, Ub, check_finite=False)
            vals = loss.value(Yb[:, None, :], Yhat).mean(axis=0)
            vals = vals + 0.5 * rho_x * np.sum(X0 * X0, axis=-1)
        return np.where(np.isfinite(vals), vals, _BIG)

    x0, _ = pswarm_minimize(objective, spec.n_x, cfg, vectorized=True)
    return x0


def open_loop_predict(spec, theta, dataset, loss=None, rho_x=0.0, n_bar=100, cfg=None):
    """Reconstruct ``x0`` for each experiment and simulate the model open loop.

    Returns ``(x0s, Yhats)`` as lists, one entry per experiment.
    """
    ds = as_dataset(dataset)
    x0s, Yhats = [], []
    for U, Y in ds.experiments:
        x0 = reconstruct_x0(spec, theta, U, Y, loss, rho_x, n_bar, cfg)
        _, Yhat = simulate(spec, theta, x0, U)
        x0s.append(x0)
        Yhats.append(Yhat)
    return x0s, Yhats
