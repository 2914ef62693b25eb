"""Softmax, sigmoid, sparsemax and their vector-Jacobian products.

Every function accepts an ``axis`` so the MIL heads can normalize a logit
matrix over classes (rows) or over detections (columns) without copies in the
caller. All arithmetic is float64.
"""
import numpy as np

from ._backend import kernels
from .errors import InvalidInputError

__all__ = [
    "softmax",
    "sigmoid",
    "sigmoid_grad",
    "sparsemax",
    "softmax_vjp",
    "sparsemax_vjp",
]


def _as_finite(x, name="input"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def _check_axis(arr, axis):
    if arr.ndim == 0:
        raise InvalidInputError("expected at least a 1-D array")
    if arr.shape[axis] < 1:
        raise InvalidInputError("cannot normalize over an empty axis")


def softmax(z, axis=-1):
    """Numerically stable softmax along ``axis``."""
    z = _as_finite(z, "logits")
    _check_axis(z, axis)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), evaluated without overflow."""
    x = _as_finite(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def sigmoid_grad(x):
    """Derivative S(x)(1 - S(x))."""
    s = sigmoid(x)
    return s * (1.0 - s)


def _apply_rows(fn, axis, *arrays):
    # move the normalized axis last and flatten the rest into rows
    moved = [np.moveaxis(a, axis, -1) for a in arrays]
    shape = moved[0].shape
    flat = [np.ascontiguousarray(m).reshape(-1, shape[-1]) for m in moved]
    out = fn(*flat).reshape(shape)
    return np.moveaxis(out, -1, axis)


def sparsemax(z, axis=-1):
    """Euclidean projection onto the probability simplex along ``axis``.

    Uses the sort-and-threshold solution: with ``z`` sorted in decreasing order,
    the support size is the largest ``k`` with ``1 + k z_(k) > sum_{j<=k} z_(j)``
    and ``tau = (sum_{j<=k} z_(j) - 1) / k``; the result is ``max(z - tau, 0)``.
    """
    z = _as_finite(z, "logits")
    _check_axis(z, axis)
    return _apply_rows(kernels.sparsemax_rows, axis, z)


def _check_pair(p, u):
    p = np.asarray(p, dtype=np.float64)
    u = _as_finite(u, "upstream gradient")
    if p.shape != u.shape:
        raise InvalidInputError(f"shape mismatch: {p.shape} vs {u.shape}")
    return p, u


def softmax_vjp(p, upstream, axis=-1):
    """Return J^T u for J = diag(p) - p p^T, given ``p = softmax(z)``."""
    p, u = _check_pair(p, upstream)
    _check_axis(p, axis)
    return p * (u - (p * u).sum(axis=axis, keepdims=True))


def sparsemax_vjp(p, upstream, axis=-1):
    """Sparsemax VJP: on the support of ``p`` center ``u``; zero elsewhere."""
    p, u = _check_pair(p, upstream)
    _check_axis(p, axis)
    return _apply_rows(kernels.sparsemax_rows_vjp, axis, p, u)
