"""RBF-FD weights with the polyharmonic r^3 kernel and degree-2 monomial
augmentation.

For a stencil ``x_1..x_s`` (row 0 is the node where the operator is wanted)
the weights ``w`` of a linear operator ``L`` solve the saddle-point system::

    | A   P | | w |   | L phi(|x - x_j|) at x_0 |
    | P^T 0 | | l | = | L p_k(x)          at x_0 |

with ``A_ij = |x_i - x_j|^3`` and ``P_ik = p_k(x_i)`` over the monomials
``1, x, y, x^2, xy, y^2``. Coordinates are shifted so the evaluation node
sits at the origin before assembly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .linalg import COND_LIMIT, ConditioningError, lu_factor, lu_solve

MONOMIALS: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
N_POLY = len(MONOMIALS)


class DiffOp(enum.Enum):
    IDENTITY = "identity"
    DX = "dx"
    DY = "dy"
    LAPLACIAN = "laplacian"


OPERATORS = (DiffOp.DX, DiffOp.DY, DiffOp.LAPLACIAN)


@dataclass(frozen=True)
class WeightSet:
    op: DiffOp
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class AugmentedSystem:
    matrix: np.ndarray
    rhs: np.ndarray


def phs3(r):
    """The polyharmonic spline kernel ``r**3``."""
    return np.asarray(r, dtype=np.float64) ** 3


def phs3_applied(op: DiffOp, eval_point, center):
    """``op`` applied to ``|x - center|^3`` and evaluated at ``eval_point``.

    Broadcasts over leading dimensions of both point arguments.
    """
    d = np.asarray(eval_point, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    r = np.hypot(d[..., 0], d[..., 1])
    if op is DiffOp.IDENTITY:
        return r ** 3
    if op is DiffOp.DX:
        return 3.0 * r * d[..., 0]
    if op is DiffOp.DY:
        return 3.0 * r * d[..., 1]
    if op is DiffOp.LAPLACIAN:
        return 9.0 * r
    raise ValueError(f"unsupported operator {op!r}")


def monomial_applied(op: DiffOp, exponents: tuple[int, int], eval_point):
    nx, ny = exponents
    if nx < 0 or ny < 0 or nx + ny > 2:
        raise ValueError(f"monomial exponents {exponents} outside degree 2")
    p = np.asarray(eval_point, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]

    def mono(a, b, c):
        # c * x^a * y^b with vanishing terms for negative powers
        if a < 0 or b < 0 or c == 0:
            return np.zeros_like(x)
        return c * x ** a * y ** b

    if op is DiffOp.IDENTITY:
        return mono(nx, ny, 1.0)
    if op is DiffOp.DX:
        return mono(nx - 1, ny, float(nx))
    if op is DiffOp.DY:
        return mono(nx, ny - 1, float(ny))
    if op is DiffOp.LAPLACIAN:
        return mono(nx - 2, ny, float(nx * (nx - 1))) + mono(nx, ny - 2, float(ny * (ny - 1)))
    raise ValueError(f"unsupported operator {op!r}")


def _as_stack(coords) -> np.ndarray:
    pts = np.asarray(getattr(coords, "coords", coords), dtype=np.float64)
    if pts.ndim < 2 or pts.shape[-1] != 2:
        raise ValueError(f"expected points of shape (..., s, 2), got {pts.shape}")
    return pts


def system_matrix(coords) -> np.ndarray:
    """The ``(s+6) x (s+6)`` collocation matrix for one stencil or a stack."""
    pts = _as_stack(coords)
    pts = pts - pts[..., :1, :]
    s = pts.shape[-2]
    diff = pts[..., :, None, :] - pts[..., None, :, :]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    # max(d_ij, d_ji) gives bit-level symmetry regardless of rounding in the differences
    dist = np.maximum(dist, np.swapaxes(dist, -1, -2))
    poly = np.stack([monomial_applied(DiffOp.IDENTITY, e, pts) for e in MONOMIALS], axis=-1)
    n = s + N_POLY
    mat = np.zeros(pts.shape[:-2] + (n, n))
    mat[..., :s, :s] = phs3(dist)
    mat[..., :s, s:] = poly
    mat[..., s:, :s] = np.swapaxes(poly, -1, -2)
    return mat


def system_rhs(coords, op: DiffOp) -> np.ndarray:
    pts = _as_stack(coords)
    pts = pts - pts[..., :1, :]
    origin = np.zeros(pts.shape[:-2] + (1, 2))
    rbf_part = phs3_applied(op, origin, pts)
    poly_part = np.stack(
        [np.broadcast_to(monomial_applied(op, e, origin[..., 0, :]), pts.shape[:-2])
         for e in MONOMIALS], axis=-1)
    return np.concatenate([rbf_part, poly_part], axis=-1)


def build_system(coords, op: DiffOp) -> AugmentedSystem:
    return AugmentedSystem(system_matrix(coords), system_rhs(coords, op))


def _check_size(pts: np.ndarray) -> None:
    if pts.shape[-2] < N_POLY:
        raise ConditioningError(
            f"stencil of {pts.shape[-2]} nodes cannot determine {N_POLY} monomial terms",
            np.inf)


def solve_weights_many(coords, ops=OPERATORS, cond_limit: float = COND_LIMIT):
    """Weights for several operators, sharing one factorization per stencil.

    ``coords`` is ``(s, 2)`` or a stack ``(B, s, 2)``. Returns
    ``(weights, cond)`` with ``weights`` of shape ``(..., len(ops), s)`` and
    ``cond`` the pivot-ratio estimate per stencil. Does not raise on bad
    conditioning: callers decide what to do with ``cond``.
    """
    pts = _as_stack(coords)
    _check_size(pts)
    s = pts.shape[-2]
    lu, piv, cond = lu_factor(system_matrix(pts))
    rhs = np.stack([system_rhs(pts, op) for op in ops], axis=-1)
    sol = lu_solve(lu, piv, rhs)
    return np.swapaxes(sol[..., :s, :], -1, -2), cond


def solve_weights(coords, op: DiffOp, cond_limit: float = COND_LIMIT) -> WeightSet:
    """RBF-FD weights of ``op`` at ``coords[0]`` for a single stencil.

    Raises :class:`ConditioningError` for duplicate or collinear node sets.
    """
    pts = _as_stack(coords)
    if pts.ndim != 2:
        raise ValueError("solve_weights takes a single stencil; use solve_weights_many")
    w, cond = solve_weights_many(pts, (op,))
    if not cond <= cond_limit:
        raise ConditioningError(
            f"stencil system is numerically singular (pivot ratio {float(cond):.3e})",
            float(cond))
    return WeightSet(op, w[0])


def apply_weights(weights, field_values) -> float:
    """Operator approximation ``sum_j w_j u_j``."""
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    u = np.asarray(field_values, dtype=np.float64)
    if w.shape != u.shape:
        raise ValueError(f"weights {w.shape} and field values {u.shape} differ in length")
    return float(w @ u)
