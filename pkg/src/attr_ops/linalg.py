"""Dense float64 primitives used by the composition model and its losses.

Single-vector operations (``matvec``, ``euclidean_distance``, ...) validate
shapes and finiteness. The ``grouped_*`` and ``row_*`` helpers are their
batched counterparts for the loss kernels: they skip per-call validation and
keep memory at O(batch * D) by grouping rows that share an operator instead
of materialising one D x D matrix per row.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt

from .errors import DimensionError, NonFiniteError, SingularMatrix, ValidationError

Vec = npt.NDArray[np.float64]
Mat = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.int64]

PIVOT_TOL = 1e-12
DISTANCE_FLOOR = 1e-12


def as_vec(data: npt.ArrayLike, name: str = "vector") -> Vec:
    """Return ``data`` as a 1-D float64 array, validating it."""
    vec = np.asarray(data, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {vec.shape}")
    _require_finite(vec, name)
    return vec


def matvec(m: Mat, v: Vec) -> Vec:
    """Matrix-vector product ``m @ v``.

    Raises:
        DimensionError: If ``m.cols != len(v)``; the message carries both shapes.
    """
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(
            f"matvec shape mismatch: matrix {m.shape} vs vector {v.shape}"
        )
    out: Vec = m @ v
    _require_finite(out, "matvec result")
    return out


def matmul(a: Mat, b: Mat) -> Mat:
    """Matrix product ``a @ b``.

    Raises:
        DimensionError: If ``a.cols != b.rows``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out: Mat = a @ b
    _require_finite(out, "matmul result")
    return out


def lu_factor(m: Mat, name: str | None = None) -> tuple[Mat, IndexArray]:
    """LU factorisation with partial pivoting.

    Args:
        m: Square matrix.
        name: Attribute name reported if the matrix is singular.

    Returns:
        ``(lu, perm)`` where the strict lower triangle of ``lu`` holds L (unit
        diagonal implied), the upper triangle holds U and ``m[perm] = L @ U``.

    Raises:
        DimensionError: If ``m`` is not square.
        SingularMatrix: If a pivot magnitude falls below ``PIVOT_TOL``.
    """
    lu = np.array(m, dtype=np.float64, copy=True)
    if lu.ndim != 2 or lu.shape[0] != lu.shape[1]:
        raise DimensionError(f"LU needs a square matrix, got shape {lu.shape}")
    n = lu.shape[0]
    perm = np.arange(n, dtype=np.int64)
    for k in range(n):
        pivot = k + int(np.argmax(np.abs(lu[k:, k])))
        if not abs(lu[pivot, k]) >= PIVOT_TOL:
            raise SingularMatrix(
                f"pivot {abs(lu[pivot, k]):.3e} below {PIVOT_TOL:g} at column {k}",
                attribute=name,
            )
        if pivot != k:
            lu[[k, pivot]] = lu[[pivot, k]]
            perm[[k, pivot]] = perm[[pivot, k]]
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, perm


def lu_invert(m: Mat, name: str | None = None) -> Mat:
    """Invert a square matrix through ``lu_factor``.

    Raises:
        SingularMatrix: Named after ``name`` when given.
    """
    lu, perm = lu_factor(m, name)
    n = lu.shape[0]
    x = np.eye(n)[perm]
    for i in range(n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in reversed(range(n)):
        x[i] = (x[i] - lu[i, i + 1 :] @ x[i + 1 :]) / lu[i, i]
    _require_finite(x, f"inverse of {name}" if name else "inverse")
    return x


def lu_invert_stack(
    mats: npt.NDArray[np.float64], names: Sequence[str] | None = None
) -> npt.NDArray[np.float64]:
    """Invert a stack of square matrices, shape (K, n, n), in one pass.

    Same pivoting and tolerance as ``lu_factor``, applied to every matrix of
    the stack at once.

    Raises:
        DimensionError: If ``mats`` is not a stack of square matrices.
        SingularMatrix: Named after the first singular matrix's entry of ``names``.
    """
    lu = np.array(mats, dtype=np.float64, copy=True)
    if lu.ndim != 3 or lu.shape[1] != lu.shape[2]:
        raise DimensionError(f"expected a (K, n, n) stack, got shape {lu.shape}")
    k_mats, n = lu.shape[0], lu.shape[1]
    stack = np.arange(k_mats)
    perm = np.tile(np.arange(n, dtype=np.int64), (k_mats, 1))
    for k in range(n):
        pivot = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        magnitude = np.abs(lu[stack, pivot, k])
        bad = np.flatnonzero(~(magnitude >= PIVOT_TOL))
        if bad.size:
            first = int(bad[0])
            raise SingularMatrix(
                f"pivot {magnitude[first]:.3e} below {PIVOT_TOL:g} at column {k}",
                attribute=names[first] if names is not None else None,
            )
        rows = lu[stack, k].copy()
        lu[stack, k] = lu[stack, pivot]
        lu[stack, pivot] = rows
        swapped = perm[stack, k].copy()
        perm[stack, k] = perm[stack, pivot]
        perm[stack, pivot] = swapped
        lu[:, k + 1 :, k] /= lu[:, k, k, None]
        lu[:, k + 1 :, k + 1 :] -= lu[:, k + 1 :, k, None] * lu[:, k, None, k + 1 :]
    x = np.eye(n)[perm]
    for i in range(n):
        x[:, i] -= np.einsum("kj,kjc->kc", lu[:, i, :i], x[:, :i])
    for i in reversed(range(n)):
        rest = np.einsum("kj,kjc->kc", lu[:, i, i + 1 :], x[:, i + 1 :])
        x[:, i] = (x[:, i] - rest) / lu[:, i, i, None]
    _require_finite(x, "inverse stack")
    return x


def euclidean_distance(u: Vec, v: Vec) -> float:
    """L2 norm of ``u - v``."""
    diff = _diff(u, v)
    return math.sqrt(float(diff @ diff))


def distance_and_grad(u: Vec, v: Vec) -> tuple[float, Vec]:
    """Distance plus its gradient ``(u - v) / d`` with respect to ``u``.

    The gradient is the zero vector when ``d`` is below ``DISTANCE_FLOOR``.
    """
    diff = _diff(u, v)
    dist = math.sqrt(float(diff @ diff))
    if dist < DISTANCE_FLOOR:
        return dist, np.zeros_like(diff)
    return dist, diff / dist


def softmax_cross_entropy(logits: Vec, label: int) -> tuple[float, Vec]:
    """Cross-entropy of ``softmax(logits)`` against ``label``.

    Returns:
        ``(loss, grad)`` with ``grad = softmax(logits) - onehot(label)``.

    Raises:
        ValidationError: If ``label`` is out of range.
    """
    logits = as_vec(logits, "logits")
    if not 0 <= label < logits.shape[0]:
        raise ValidationError(f"label {label} out of range for {logits.shape[0]} classes")
    losses, grads = row_softmax_cross_entropy(logits[None, :], np.array([label]))
    return float(losses[0]), grads[0]


# ---------------------------------------------------------------------------
# Batched helpers (no validation, used by the loss kernels)
# ---------------------------------------------------------------------------


def row_distances(u: Mat, v: Mat) -> tuple[Vec, Mat]:
    """Row-wise distances and unit directions ``(u - v) / d``.

    Rows with ``d < DISTANCE_FLOOR`` get a zero direction.
    """
    diff = u - v
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    safe = np.where(dist < DISTANCE_FLOOR, np.inf, dist)
    return dist, diff / safe[:, None]


def row_softmax_cross_entropy(logits: Mat, labels: IndexArray) -> tuple[Vec, Mat]:
    """Row-wise ``softmax_cross_entropy`` with max-subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = log_norm - shifted[rows, labels]
    grads = np.exp(shifted - log_norm[:, None])
    grads[rows, labels] -= 1.0
    return losses, grads


def grouped_matvec(mats: npt.NDArray[np.float64], idx: IndexArray, vecs: Mat,
                   transpose: bool = False) -> Mat:
    """Compute ``mats[idx[i]] @ vecs[i]`` (or the transpose) for every row ``i``."""
    out = np.empty((vecs.shape[0], mats.shape[1] if not transpose else mats.shape[2]))
    for key in np.unique(idx):
        rows = idx == key
        mat = mats[key]
        out[rows] = vecs[rows] @ (mat if transpose else mat.T)
    return out


def grouped_outer_add(out: npt.NDArray[np.float64], idx: IndexArray, left: Mat,
                      right: Mat) -> None:
    """Accumulate ``out[idx[i]] += outer(left[i], right[i])`` in place.

    Groups are visited in ascending index order, so the result is reproducible.
    """
    for key in np.unique(idx):
        rows = idx == key
        out[key] += left[rows].T @ right[rows]


def pairwise_distances(queries: Mat, points: Mat, max_elements: int = 1 << 22) -> Mat:
    """Exact ``D[i, j] = ||queries[i] - points[j]||``, chunked over queries."""
    n_q, n_p = queries.shape[0], points.shape[0]
    out = np.empty((n_q, n_p))
    chunk = max(1, max_elements // max(1, n_p * points.shape[1]))
    for start in range(0, n_q, chunk):
        diff = queries[start : start + chunk, None, :] - points[None, :, :]
        out[start : start + chunk] = np.sqrt(np.einsum("qpd,qpd->qp", diff, diff))
    return out


def _diff(u: Vec, v: Vec) -> Vec:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(
            f"distance needs equal-length vectors, got {u.shape} and {v.shape}"
        )
    diff: Vec = u - v
    return diff


def _require_finite(arr: npt.NDArray[np.float64], name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(name)
