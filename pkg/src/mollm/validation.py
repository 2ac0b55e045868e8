"""Input validation helpers shared by the numeric modules."""

import numpy as np

from .exceptions import ValidationError


def check_vector(v, name="vector", dim=None):
    """Return ``v`` as a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValidationError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


def check_matrix(rows, name="rows", dim=None):
    """Return a list of vectors as a finite 2-D float64 array (possibly 0 rows)."""
    if isinstance(rows, np.ndarray) and rows.ndim == 2:
        arr = np.asarray(rows, dtype=np.float64)
    else:
        rows = list(rows)
        if not rows:
            return np.zeros((0, dim if dim is not None else 0))
        arr = np.vstack([check_vector(r, name) for r in rows])
    if dim is not None and arr.shape[1] != dim:
        raise ValidationError(f"{name} have dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contain NaN or Inf")
    return arr


def check_tokens(tokens, vocab_size, name="tokens"):
    """Return an integer array of token ids, all in ``[0, vocab_size)``."""
    arr = np.asarray(tokens)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValidationError(f"{name} must be integer token ids")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValidationError(f"{name} out of range [0, {vocab_size})")
    return arr


def check_probabilities(probs, name="probs", atol=1e-9):
    """Return a 2-D array whose rows lie on the probability simplex."""
    arr = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValidationError(f"{name} must be finite and non-negative")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > atol):
        raise ValidationError(f"{name} rows must sum to 1")
    return arr


def check_epsilon(eps):
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {eps}")
    return eps
