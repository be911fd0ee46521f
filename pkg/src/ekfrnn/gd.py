"""Gradient-descent baselines in condensed, relaxed and partially condensed form.

All gradients come from reverse accumulation through the model Jacobians
(backpropagation through time). The objectives handle several experiments
by summing per-experiment terms, each averaged over its own length, plus one
parameter regularizer; consistency penalties never cross experiment
boundaries.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .data import as_dataset, score
from .errors import DimensionMismatch
from .models import init_params, simulate
from .numerics import make_rng
from .objectives import (
    MSELoss,
    theta_reg_grad,
    theta_reg_value,
    x0_reg_grad,
    x0_reg_value,
)

logger = logging.getLogger(__name__)


def batch_lengths(N, M):
    """Default split: ``M - 1`` batches of ``ceil(N/M)`` samples and the remainder."""
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    L = math.ceil(N / M)
    last = N - (M - 1) * L
    if last < 1:
        raise ValueError(f"N={N} cannot be split into M={M} batches of length ceil(N/M)={L}")
    return [L] * (M - 1) + [last]


def batch_index(lengths, j, h):
    """Sample index of step ``h`` inside batch ``j``."""
    return h + sum(lengths[:j])


def _segment(spec, loss, U, Y, x_start, th_x, th_y, scale, target=None, coef=0.0):
    """Loss along an unroll of ``len(U)`` steps from ``x_start``.

    Computes ``scale * sum_h loss(Y[h], yhat_h)`` and, with a ``target``, adds
    ``coef * ||target - xhat_L||^2`` on the state reached after the last
    step. Returns the value and the gradients with respect to ``x_start``,
    ``theta_x``, ``theta_y`` and ``target``.
    """
    L = U.shape[0]
    need_last_fx = target is not None
    x = np.asarray(x_start, dtype=float)
    value = 0.0
    gys, Cxs, Cths, Axs, Aths = [], [], [], [], []
    for h in range(L):
        yhat, Cx, _, Cth = spec.fy_jac(x, U[h], th_y)
        value += scale * float(loss.value(Y[h], yhat))
        gys.append(scale * np.atleast_1d(loss.grad(Y[h], yhat)))
        Cxs.append(Cx)
        Cths.append(Cth)
        if h < L - 1 or need_last_fx:
            x, Ax, _, Ath = spec.fx_jac(x, U[h], th_x)
            Axs.append(Ax)
            Aths.append(Ath)

    g_thx = np.zeros(th_x.size)
    g_thy = np.zeros(th_y.size)
    g_target = None
    if target is not None:
        r = np.asarray(target, dtype=float) - x
        value += coef * float(r @ r)
        g_target = 2.0 * coef * r
        lam = -2.0 * coef * r  # d value / d xhat_L
    else:
        lam = np.zeros(spec.n_x)
    for h in range(L - 1, -1, -1):
        if h < len(Axs):
            g_thx += Aths[h].T @ lam
            lam = Axs[h].T @ lam
        lam = lam + Cxs[h].T @ gys[h]
        g_thy += Cths[h].T @ gys[h]
    return value, lam, g_thx, g_thy, g_target


def _per_exp(xs, n_exp):
    if n_exp == 1 and not isinstance(xs, (list, tuple)):
        return [xs]
    return list(xs)


def condensed_value_grad(spec, loss, regs, dataset, x0, theta):
    """Objective with the states eliminated, and its gradients.

    Returns ``(V, dV/dx0, dV/dtheta)``; ``dV/dx0`` is a list when the dataset
    holds several experiments.
    """
    ds = as_dataset(dataset)
    x0s = _per_exp(x0, ds.n_experiments)
    th_x, th_y = spec.split(theta)
    V = theta_reg_value(regs, theta)
    g_th = theta_reg_grad(regs, theta)
    g_x0 = []
    for (U, Y), x0d in zip(ds.experiments, x0s):
        v, gx, gtx, gty, _ = _segment(spec, loss, U, Y, x0d, th_x, th_y, 1.0 / U.shape[0])
        V += v + float(x0_reg_value(regs, x0d))
        g_x0.append(gx + x0_reg_grad(regs, x0d))
        g_th = g_th + np.concatenate([gtx, gty])
    if ds.n_experiments == 1 and not isinstance(x0, (list, tuple)):
        g_x0 = g_x0[0]
    return V, g_x0, g_th


def relaxed_value(spec, loss, regs, dataset, x_seq, theta, gamma):
    """Objective with every state free and the model equations penalized by ``gamma``.

    ``x_seq`` is ``N x n_x`` (a list of such arrays for several experiments).
    """
    ds = as_dataset(dataset)
    xseqs = _per_exp(x_seq, ds.n_experiments)
    th_x, th_y = spec.split(theta)
    V = theta_reg_value(regs, theta)
    for (U, Y), X in zip(ds.experiments, xseqs):
        X = np.asarray(X, dtype=float)
        N = U.shape[0]
        if X.shape != (N, spec.n_x):
            raise DimensionMismatch(f"x_seq has shape {X.shape}, expected {(N, spec.n_x)}")
        Yhat = spec.fy(X, U, th_y)
        V += float(x0_reg_value(regs, X[0]))
        V += float(np.sum(loss.value(Y, Yhat))) / N
        if N > 1:
            F = spec.fx(X[:-1], U[:-1], th_x)
            V += gamma / (2.0 * N) * float(np.sum((X[1:] - F) ** 2))
    return V


def partial_value_grad(spec, loss, regs, dataset, anchors, theta, gamma, M=None, lengths=None):
    """Partially condensed objective with one free anchor state per batch.

    Parameters
    ----------
    anchors : array (M, n_x) or list of them per experiment
    M : int, optional
        Number of batches (default split); ignored when ``lengths`` is given.
    lengths : list of int, optional
        Explicit batch lengths (single experiment only).

    Returns
    -------
    V, dV/danchors (same structure as ``anchors``), dV/dtheta
    """
    ds = as_dataset(dataset)
    anchor_list = _per_exp(anchors, ds.n_experiments)
    th_x, th_y = spec.split(theta)
    V = theta_reg_value(regs, theta)
    g_th = theta_reg_grad(regs, theta)
    g_anchors = []
    for (U, Y), A in zip(ds.experiments, anchor_list):
        A = np.asarray(A, dtype=float)
        N = U.shape[0]
        Ls = lengths if lengths is not None else batch_lengths(N, M if M is not None else A.shape[0])
        Mb = len(Ls)
        if A.shape != (Mb, spec.n_x):
            raise DimensionMismatch(f"anchors have shape {A.shape}, expected {(Mb, spec.n_x)}")
        coef = gamma * (N - 1) / (2.0 * N * (Mb - 1)) if Mb > 1 else 0.0
        gA = np.zeros_like(A)
        start = 0
        for j, L in enumerate(Ls):
            sl = slice(start, start + L)
            target = A[j + 1] if j < Mb - 1 else None
            v, gx, gtx, gty, gt = _segment(spec, loss, U[sl], Y[sl], A[j], th_x, th_y,
                                           1.0 / N, target, coef)
            V += v
            gA[j] += gx
            if gt is not None:
                gA[j + 1] += gt
            g_th = g_th + np.concatenate([gtx, gty])
            start += L
        V += float(x0_reg_value(regs, A[0]))
        gA[0] += x0_reg_grad(regs, A[0])
        g_anchors.append(gA)
    if ds.n_experiments == 1 and not isinstance(anchors, (list, tuple)):
        g_anchors = g_anchors[0]
    return V, g_anchors, g_th


def sgd_relaxed_step(spec, loss, regs, k, u_k, y_k, x_k, x_next, theta, gamma, alpha, N):
    """Stochastic step on the relaxed objective touching only ``(x_k, x_{k+1}, theta)``.

    ``x_next=None`` marks the last sample of an experiment, which has no
    consistency term. The state regularizer only acts at ``k = 0``; the
    parameter regularizer gradient is weighted by ``1/N``.

    Returns the updated ``(x_k, x_next, theta)``.
    """
    th_x, th_y = spec.split(theta)
    x_k = np.asarray(x_k, dtype=float)
    yhat, Cx, _, Cth = spec.fy_jac(x_k, u_k, th_y)
    gy = np.atleast_1d(loss.grad(y_k, yhat))
    d_xk = Cx.T @ gy
    d_thx = np.zeros(th_x.size)
    d_thy = Cth.T @ gy
    d_next = None
    if x_next is not None:
        f_k, Ax, _, Ath = spec.fx_jac(x_k, u_k, th_x)
        r = np.asarray(x_next, dtype=float) - f_k
        d_next = gamma * r
        d_xk = d_xk - gamma * (Ax.T @ r)
        d_thx = d_thx - gamma * (Ath.T @ r)
    if k == 0:
        d_xk = d_xk + x0_reg_grad(regs, x_k) / N
    d_th = np.concatenate([d_thx, d_thy]) + theta_reg_grad(regs, theta) / N
    new_next = None if x_next is None else np.asarray(x_next, dtype=float) - alpha * d_next
    return x_k - alpha * d_xk, new_next, np.asarray(theta, dtype=float) - alpha * d_th


@dataclass
class AdamState:
    """Moments and step count of a bias-corrected Adam optimizer."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0


def adam_step(state, params, grad):
    """Return updated parameters; ``state`` is advanced in place."""
    grad = np.asarray(grad, dtype=float)
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    if state.m.shape != grad.shape or np.shape(params) != grad.shape:
        raise ValueError("params, gradient and moments must share a shape")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return np.asarray(params, dtype=float) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class GdResult:
    theta: np.ndarray
    x_vars: list
    x0s: list
    best_epoch: int
    log: list


def _pack(xs, theta):
    return np.concatenate([np.ravel(x) for x in xs] + [theta])


def _unpack(vec, shapes, n_theta):
    out, pos = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(vec[pos:pos + n].reshape(shp))
        pos += n
    return out, vec[pos:pos + n_theta]


def train_gd(data, spec, mode="condensed", optimizer="adam", epochs=500, rng=None,
             lr=0.005, loss=None, regs=(), gamma=1e-4, M=50, theta0=None):
    """Epoch loop of a gradient method on one of the three formulations.

    Parameters
    ----------
    mode : {'condensed', 'partial', 'relaxed'}
        ``condensed`` takes one full-gradient step per epoch. ``partial``
        processes ``M`` batches per epoch, each step using the batch's
        share of the objective (scaled by ``M``). ``relaxed`` is the
        per-sample case ``M = N``; with ``optimizer='sgd'`` it runs the
        plain stochastic relaxed step.
    optimizer : {'adam', 'sgd'}
    lr : float
        Learning rate (required, never tuned automatically).

    Returns
    -------
    GdResult
        Best-epoch parameters (lowest objective evaluated by simulating from
        the current initial state), the final free state variables and the log.
    """
    ds = as_dataset(data)
    loss = loss or MSELoss()
    rng = rng if rng is not None else make_rng(0)
    regs = tuple(regs)
    if mode not in ("condensed", "partial", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    theta = init_params(spec, rng) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    n_x = spec.n_x

    if mode == "condensed":
        xs = [np.zeros(n_x) for _ in ds.experiments]
        splits = None
    else:
        splits = []
        xs = []
        for U, _ in ds.experiments:
            N = U.shape[0]
            Ls = [1] * N if mode == "relaxed" else batch_lengths(N, min(M, N))
            splits.append(Ls)
            X, _ = simulate(spec, theta, np.zeros(n_x), U)
            starts = np.cumsum([0] + Ls[:-1])
            xs.append(X[starts].copy())
    shapes = [x.shape for x in xs]
    adam = AdamState(lr=lr)

    def step(vec, grad):
        if optimizer == "adam":
            return adam_step(adam, vec, grad)
        return vec - lr * grad

    log = []
    best = (np.inf, None, None, -1)
    t0 = time.perf_counter()
    for epoch in range(epochs):
        if mode == "condensed":
            _, gx, gth = condensed_value_grad(spec, loss, regs, ds, list(xs), theta)
            vec = step(_pack(xs, theta), _pack(gx, gth))
            xs, theta = _unpack(vec, shapes, theta.size)
        elif mode == "relaxed" and optimizer == "sgd":
            for e, (U, Y) in enumerate(ds.experiments):
                X = xs[e]
                N = U.shape[0]
                for k in range(N):
                    nxt = X[k + 1] if k < N - 1 else None
                    xk, xn, theta = sgd_relaxed_step(spec, loss, regs, k, U[k], Y[k], X[k],
                                                     nxt, theta, gamma, lr, N)
                    X[k] = xk
                    if xn is not None:
                        X[k + 1] = xn
        else:
            xs, theta = _partial_epoch(spec, loss, regs, ds, xs, theta, gamma, splits,
                                       shapes, step)
        x0s = [x if mode == "condensed" else x[0] for x in xs]
        Yhats = [simulate(spec, theta, x0, U)[1] for x0, (U, _) in zip(x0s, ds.experiments)]
        V = theta_reg_value(regs, theta) + sum(
            float(x0_reg_value(regs, x0)) + float(np.mean(loss.value(Y, Yh)))
            for x0, (_, Y), Yh in zip(x0s, ds.experiments, Yhats))
        _, fit = score(ds, Yhats)
        zf = float(np.mean(np.abs(theta) <= 1e-3)) if theta.size else 0.0
        log.append({"epoch": epoch + 1, "objective": V, "fit": fit,
                    "zero_fraction": zf, "wall_time": time.perf_counter() - t0})
        if V < best[0]:
            best = (V, theta.copy(), [np.array(x) for x in x0s], epoch + 1)
    return GdResult(theta=best[1], x_vars=[np.array(x) for x in xs], x0s=best[2],
                    best_epoch=best[3], log=log)


def _partial_epoch(spec, loss, regs, ds, xs, theta, gamma, splits, shapes, step):
    """One pass over all batches; every step updates ``(x_j, x_{j+1}, theta)``."""
    th_size = theta.size
    # each step descends total_batches * (its share of the objective)
    total_batches = sum(len(Ls) for Ls in splits)
    for e, (U, Y) in enumerate(ds.experiments):
        Ls = splits[e]
        N = U.shape[0]
        Mb = len(Ls)
        coef = gamma * (N - 1) / (2.0 * N * (Mb - 1)) if Mb > 1 else 0.0
        start = 0
        for j, L in enumerate(Ls):
            th_x, th_y = spec.split(theta)
            A = xs[e]
            sl = slice(start, start + L)
            target = A[j + 1] if j < Mb - 1 else None
            _, gx, gtx, gty, gt = _segment(spec, loss, U[sl], Y[sl], A[j], th_x, th_y,
                                           1.0 / N, target, coef)
            g_xs = [np.zeros(s) for s in shapes]
            g_xs[e][j] += gx
            if gt is not None:
                g_xs[e][j + 1] += gt
            if j == 0:
                g_xs[e][0] += x0_reg_grad(regs, A[0])
            g_th = np.concatenate([gtx, gty]) + theta_reg_grad(regs, theta) / total_batches
            grad = _pack([g * total_batches for g in g_xs], g_th * total_batches)
            vec = step(_pack(xs, theta), grad)
            xs, theta = _unpack(vec, shapes, th_size)
            xs = [np.array(x) for x in xs]
            start += L
    return xs, theta
