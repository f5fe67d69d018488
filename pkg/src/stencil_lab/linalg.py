"""Dense LU factorization with partial pivoting, vectorized over a stack of
small systems.

RBF-FD weight systems are tiny (at most a few dozen unknowns) but there are
many of them, so the elimination loop runs over the matrix order while every
step operates on the whole stack at once.
"""
from __future__ import annotations

import numpy as np

COND_LIMIT = 1e12


class ConditioningError(ValueError):
    """Raised when a system is singular or numerically rank deficient."""

    def __init__(self, message: str, condition: np.ndarray | float):
        super().__init__(message)
        self.condition = condition


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factor ``a`` (shape ``(..., n, n)``) as ``P a = L U``.

    Returns ``(lu, piv, cond)`` where ``lu`` packs the unit lower factor below
    the diagonal and ``U`` on and above it, ``piv[..., k]`` is the row swapped
    with row ``k`` at step ``k``, and ``cond`` is the pivot-ratio estimate
    ``max|u_kk| / min|u_kk|`` (``inf`` for an exactly singular system).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected a stack of square matrices, got {a.shape}")
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    lu = a.reshape(-1, n, n).copy()
    m = lu.shape[0]
    rows = np.arange(m)
    piv = np.empty((m, n), dtype=np.intp)

    for k in range(n):
        p = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        piv[:, k] = p
        swap = p != k
        if swap.any():
            r = rows[swap]
            tmp = lu[r, k, :].copy()
            lu[r, k, :] = lu[r, p[swap], :]
            lu[r, p[swap], :] = tmp
        pivot = lu[:, k, k]
        safe = np.where(pivot == 0.0, 1.0, pivot)
        lu[:, k + 1:, k] /= safe[:, None]
        lu[:, k + 1:, k + 1:] -= lu[:, k + 1:, k, None] * lu[:, k, None, k + 1:]

    diag = np.abs(np.diagonal(lu, axis1=1, axis2=2))
    dmax = diag.max(axis=1)
    dmin = diag.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(dmin > 0.0, dmax / np.where(dmin > 0.0, dmin, 1.0), np.inf)
    return (lu.reshape(*batch_shape, n, n), piv.reshape(*batch_shape, n),
            cond.reshape(batch_shape))


def lu_solve(lu: np.ndarray, piv: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve with a factorization from :func:`lu_factor`.

    ``b`` has shape ``(..., n)`` or ``(..., n, k)`` for ``k`` right-hand sides.
    """
    n = lu.shape[-1]
    batch_shape = lu.shape[:-2]
    vector = b.ndim == lu.ndim - 1
    x = np.asarray(b, dtype=np.float64)
    if vector:
        x = x[..., None]
    x = x.reshape(-1, n, x.shape[-1]).copy()
    lu2 = lu.reshape(-1, n, n)
    piv2 = piv.reshape(-1, n)
    rows = np.arange(x.shape[0])

    for k in range(n):
        p = piv2[:, k]
        tmp = x[rows, k, :].copy()
        x[rows, k, :] = x[rows, p, :]
        x[rows, p, :] = tmp
    for k in range(n):
        x[:, k + 1:, :] -= lu2[:, k + 1:, k, None] * x[:, k, None, :]
    # singular members of a stack yield inf/nan rows; callers screen them by ``cond``
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(n - 1, -1, -1):
            x[:, k, :] /= lu2[:, k, k, None]
            x[:, :k, :] -= lu2[:, :k, k, None] * x[:, k, None, :]

    x = x.reshape(*batch_shape, n, -1)
    return x[..., 0] if vector else x


def solve(a: np.ndarray, b: np.ndarray, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Factor and solve, raising :class:`ConditioningError` past ``cond_limit``."""
    lu, piv, cond = lu_factor(a)
    if np.any(~(cond <= cond_limit)):
        worst = float(np.max(cond))
        raise ConditioningError(
            f"system is numerically singular (pivot ratio {worst:.3e} > {cond_limit:.0e})",
            cond)
    return lu_solve(lu, piv, b)
