"""Log-domain primitives shared across the package.

Probabilities are carried as log-probabilities everywhere; ``-inf`` stands
for an exact zero and ``exp(-inf)`` is treated as 0 in every reduction.
"""

import numpy as np

SIMPLEX_TOL = 1e-9


def logsumexp(v, axis=None, keepdims=False):
    """Stable ``log(sum(exp(v)))`` along ``axis``.

    The maximum is subtracted before exponentiating, so finite inputs never
    overflow. A slice made only of ``-inf`` reduces to ``-inf``.

    Parameters
    ----------
    v : array-like
        Values in ``[-inf, +inf)``.
    axis : int or None
        Reduction axis; ``None`` reduces over all entries.
    keepdims : bool
        Keep the reduced axis with size one.

    Raises
    ------
    ValueError
        If the reduction is empty.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ValueError("empty reduction")
    m = np.max(v, axis=axis, keepdims=True)
    # all--inf slices: shift by 0 so that exp(-inf - 0) = 0 instead of NaN
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True))
    out = s + m_safe
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


def softmax_from_log(v, axis):
    """Normalized ``exp`` of ``v`` along ``axis``; all--inf slices give zeros."""
    v = np.asarray(v, dtype=np.float64)
    lse = logsumexp(v, axis=axis, keepdims=True)
    lse = np.asarray(lse)
    finite = np.isfinite(lse)
    with np.errstate(invalid="ignore"):
        w = np.exp(v - np.where(finite, lse, 0.0))
    return np.where(finite, w, 0.0)


def log_softmax(logits, axis=-1):
    """Log-probabilities ``logits - logsumexp(logits)``.

    Raises
    ------
    ValueError
        If any logit is not finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("log_softmax requires finite logits")
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def safe_log(x):
    """Entrywise log with ``log(0) = -inf`` and no warning."""
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def check_simplex(z, dim=None, tol=SIMPLEX_TOL):
    """Validate a probability vector and return it as a float64 array."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"simplex vector must be 1-D, got shape {z.shape}")
    if dim is not None and z.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {z.shape[0]}")
    if not np.all(np.isfinite(z)) or np.any(z < 0):
        raise ValueError("simplex vector entries must be finite and nonnegative")
    if abs(z.sum() - 1.0) > tol:
        raise ValueError(f"simplex vector sums to {z.sum()!r}, not 1")
    return z


def one_hot(index, dim):
    if not 0 <= index < dim:
        raise ValueError(f"class index {index} out of range [0, {dim - 1}]")
    e = np.zeros(dim)
    e[index] = 1.0
    return e


def check_log_matrix(m):
    """Validate a log-domain matrix: ``-inf`` allowed, ``+inf`` and NaN not."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(np.isnan(m)) or np.any(m == np.inf):
        raise ValueError("log-domain matrix contains NaN or +inf")
    return m
