"""Dense linear algebra helpers, a finite-difference oracle and seeded RNGs."""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, NonFiniteEvaluation, NotPositiveDefinite


def make_rng(seed):
    """Return a deterministic generator for ``seed`` (PCG64, platform independent)."""
    return np.random.default_rng(seed)


def symmetrize(P):
    """Return ``(P + P') / 2``."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionMismatch(f"symmetrize needs a square matrix, got {P.shape}")
    return 0.5 * (P + P.T)


def spd_solve(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``.

    A 1x1 system is solved by plain division. Larger systems use a Cholesky
    factorization; no explicit inverse is ever formed.

    Raises
    ------
    NotPositiveDefinite
        If the Cholesky factorization fails (or the scalar is not positive).
    DimensionMismatch
        If shapes are incompatible.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"A is {A.shape}, B has {B.shape[0]} rows")
    if A.shape[0] == 0:
        return np.zeros_like(B)
    if A.shape[0] == 1:
        a = A[0, 0]
        if not a > 0.0:
            raise NotPositiveDefinite(f"scalar {a} is not positive")
        return B / a
    try:
        factor = cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return cho_solve(factor, B, check_finite=False)


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of the vector function ``f`` at ``x``.

    ``J[i, j] = (f_i(x + h e_j) - f_i(x - h e_j)) / (2 h)``.
    """
    if not h > 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=float).ravel()
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float)).ravel()
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float)).ravel()
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float)).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"f is not finite around x[{j}]")
        J[:, j] = (fp - fm) / (2.0 * h)
    return J


def finite_diff_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    return finite_diff_jacobian(lambda z: np.atleast_1d(f(z)), x, h)[0]
