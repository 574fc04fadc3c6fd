"""Error types and small argument-checking helpers shared across modules."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class ParameterError(ValueError):
    """Invalid parameter value or inconsistent arguments."""


class RangeError(ValueError):
    """A requested time lies outside the sampled horizon."""


class DivergenceError(FloatingPointError):
    """A trajectory left the finite range (blow-up).

    Attributes
    ----------
    last_time, last_state : time and state at the last finite node.
    """

    def __init__(self, message: str, last_time: float | None = None, last_state=None):
        super().__init__(message)
        self.last_time = last_time
        self.last_state = last_state


class IterationError(RuntimeError):
    """A fixed-point iteration did not converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class InversionError(RuntimeError):
    """Newton inversion failed and no bracketing fallback applied."""


class HypothesisError(ValueError):
    """A mathematical premise required by an operation is violated."""


class CertificateError(ValueError):
    """A Lyapunov certificate is ill-posed on the requested region."""


class ConfigError(ValueError):
    """Configuration text is malformed or contains unknown keys."""


DIVERGENCE_THRESHOLD = 1e12


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Return ``x`` as a 1-D float array, optionally checking its length."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ParameterError(f"{name} must be a vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ParameterError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    return arr


def as_points(X, dim: int, name: str = "X") -> np.ndarray:
    """Return a 2-D ``(n, dim)`` float array of points."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, dim) if dim > 1 else X.reshape(-1, 1)
    X = check_array(X, ensure_2d=True, dtype=float, input_name=name)
    if X.shape[1] != dim:
        raise ParameterError(f"{name} must have {dim} columns, got {X.shape[1]}")
    return X


def as_matrix(A, rows: int | None = None, name: str = "A") -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2:
        raise ParameterError(f"{name} must be a matrix")
    if rows is not None and A.shape[0] != rows:
        raise ParameterError(f"{name} must have {rows} rows, got {A.shape[0]}")
    return A


def check_positive(value: float, name: str, strict: bool = True) -> float:
    value = float(value)
    ok = value > 0 if strict else value >= 0
    if not (ok and np.isfinite(value)):
        bound = "> 0" if strict else ">= 0"
        raise ParameterError(f"{name} must be {bound}, got {value}")
    return value


def rate_fit(steps, errors) -> float:
    """Least-squares slope of log(error) against log(step)."""
    h = np.log(np.asarray(steps, dtype=float))
    e = np.log(np.maximum(np.asarray(errors, dtype=float), 1e-300))
    return float(np.polyfit(h, e, 1)[0])
