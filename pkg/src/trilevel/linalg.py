"""Dense linear-algebra kernel.

Minimal numerics used by the adjoint engines and the synthetic problems:
a linear conjugate-gradient solver with non-positive-curvature detection,
a partial-pivot LU direct solver, and the order-3 tensor contractions
required when assembling the exact reduced Hessians.

Vectors, matrices, and order-3 tensors are plain float64 ndarrays of
rank 1, 2, and 3 (row-major). All operations are pure; inputs are never
mutated.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

# Below this, a pivot or a curvature value counts as zero.
PIVOT_TOL = 1e-12
CURVATURE_TOL = 1e-14


class SingularMatrixError(ValueError):
    """Raised when LU elimination meets a pivot below tolerance."""


def as_vector(v, name: str = "vector") -> Array:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> Array:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_tensor3(t, name: str = "tensor") -> Array:
    arr = np.asarray(t, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class CgReport:
    """Outcome of a conjugate-gradient solve.

    ``solution`` is the final iterate; when ``terminated_on_curvature`` is
    true it is the iterate held at the moment d'Ad <= 0 was detected.
    """

    solution: Array
    iterations: int
    residual_norm: float
    terminated_on_curvature: bool


def cg_solve(
    apply_A: Callable[[Array], Array],
    b,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
) -> CgReport:
    """Solve A x = b for symmetric positive definite A given as an operator.

    Standard Hestenes-Stiefel recurrence. The residual is recomputed from
    scratch (b - A x) every 50 iterations to control drift in long solves.
    Terminates early, returning the current iterate, as soon as a search
    direction d with d'Ad <= CURVATURE_TOL * |d|^2 is met.

    Convergence criterion: |r| <= tol * max(1, |b|).
    """
    b = as_vector(b, "b")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = b.size
    if max_iters is None:
        max_iters = 10 * n
    if max_iters < 1:
        raise ValueError("max_iters must be a positive integer")

    x = np.zeros(n)
    r = b.copy()
    d = r.copy()
    rs = float(r @ r)
    threshold = tol * max(1.0, float(np.linalg.norm(b)))

    if np.sqrt(rs) <= threshold:
        return CgReport(x, 0, float(np.sqrt(rs)), False)

    for k in range(max_iters):
        Ad = np.asarray(apply_A(d), dtype=float)
        if Ad.shape != d.shape:
            raise ValueError(
                f"operator output shape {Ad.shape} does not match rhs shape {d.shape}"
            )
        if not np.all(np.isfinite(Ad)):
            raise ValueError("operator returned non-finite values")
        dAd = float(d @ Ad)
        if dAd <= CURVATURE_TOL * float(d @ d):
            res = float(np.linalg.norm(b - _apply(apply_A, x, n)))
            return CgReport(x, k, res, True)
        alpha = rs / dAd
        x = x + alpha * d
        if (k + 1) % 50 == 0:
            r = b - _apply(apply_A, x, n)
        else:
            r = r - alpha * Ad
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= threshold:
            return CgReport(x, k + 1, float(np.sqrt(rs_new)), False)
        d = r + (rs_new / rs) * d
        rs = rs_new

    return CgReport(x, max_iters, float(np.sqrt(rs)), False)


def _apply(apply_A, x, n):
    out = np.asarray(apply_A(x), dtype=float)
    if out.shape != (n,):
        raise ValueError("operator output dimension mismatch")
    return out


def tensor_contract_vec(T, v) -> Array:
    """Contract the middle index of a (d1, d2, d3) tensor with a d2-vector.

    out[a, c] = sum_b T[a, b, c] * v[b]
    """
    T = as_tensor3(T, "T")
    v = as_vector(v, "v")
    if T.shape[1] != v.size:
        raise ValueError(
            f"middle dimension {T.shape[1]} does not match vector dim {v.size}"
        )
    return np.einsum("abc,b->ac", T, v)


def tensor_contract_mat(T, M) -> Array:
    """Contract the middle index of a (d1, d2, d3) tensor with a d2 x k matrix.

    out[a, j, c] = sum_b T[a, b, c] * M[b, j], giving a (d1, k, d3) tensor.
    """
    T = as_tensor3(T, "T")
    M = as_matrix(M, "M")
    if T.shape[1] != M.shape[0]:
        raise ValueError(
            f"middle dimension {T.shape[1]} does not match matrix rows {M.shape[0]}"
        )
    return np.einsum("abc,bj->ajc", T, M)


def lu_factor(A) -> tuple[Array, Array]:
    """Partial-pivot LU factorization: returns (LU, perm) with PA = LU packed.

    Raises SingularMatrixError when the best available pivot falls below
    PIVOT_TOL in absolute value.
    """
    A = as_matrix(A, "A")
    n, nc = A.shape
    if n != nc:
        raise ValueError(f"matrix must be square, got {A.shape}")
    lu = A.copy()
    perm = np.arange(n)
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(lu[col:, col])))
        if abs(lu[pivot_row, col]) < PIVOT_TOL:
            raise SingularMatrixError(
                f"pivot {lu[pivot_row, col]:.3e} below tolerance at column {col}"
            )
        if pivot_row != col:
            lu[[col, pivot_row]] = lu[[pivot_row, col]]
            perm[[col, pivot_row]] = perm[[pivot_row, col]]
        factors = lu[col + 1 :, col] / lu[col, col]
        lu[col + 1 :, col] = factors
        lu[col + 1 :, col + 1 :] -= np.outer(factors, lu[col, col + 1 :])
    return lu, perm


def lu_solve(lu: Array, perm: Array, B) -> Array:
    """Solve with a factorization from :func:`lu_factor`; B is a vector or matrix."""
    b = np.asarray(B, dtype=float)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    n = lu.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"rhs has {b.shape[0]} rows, expected {n}")
    x = b[perm].copy()
    for col in range(n):  # forward: L y = P b (unit diagonal)
        x[col + 1 :] -= np.outer(lu[col + 1 :, col], x[col])
    for col in range(n - 1, -1, -1):  # backward: U x = y
        x[col] /= lu[col, col]
        if col:
            x[:col] -= np.outer(lu[:col, col], x[col])
    return x[:, 0] if vector_rhs else x


def solve_dense(A, B) -> Array:
    """Direct solve A X = B by partial-pivot LU; B may be a vector or matrix."""
    lu, perm = lu_factor(A)
    return lu_solve(lu, perm, B)


# Factorization cache keyed by array identity: oracles that return the same
# Hessian object for every call (constant-curvature problems) get their LU
# computed once. Values hold a strong reference to the key array, so ids
# stay valid; the cache is small and evicts FIFO.
_LU_CACHE: dict[int, tuple] = {}
_LU_CACHE_MAX = 64


def lu_factor_cached(A) -> tuple[Array, Array]:
    key = id(A)
    hit = _LU_CACHE.get(key)
    if hit is not None and hit[0] is A:
        return hit[1]
    fact = lu_factor(A)
    if len(_LU_CACHE) >= _LU_CACHE_MAX:
        _LU_CACHE.pop(next(iter(_LU_CACHE)))
    _LU_CACHE[key] = (A, fact)
    return fact


def is_symmetric(A: Array, rtol: float = 1e-12) -> bool:
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        return False
    scale = np.maximum(1.0, np.abs(A))
    return bool(np.all(np.abs(A - A.T) <= rtol * scale))
