"""Input validation helpers used at public entry points."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ParameterError, ShapeError


def as_matrix(a, name="matrix", *, copy=False, allow_empty=False) -> np.ndarray:
    """Return ``a`` as a finite, 2-D float64 array.

    Accepts anything ``np.asarray`` understands. Raises :class:`ShapeError`
    for non-2-D input and :class:`ParameterError` for NaN/Inf entries.
    """
    arr = np.array(a, dtype=np.float64) if copy else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return arr


def check_positive_int(value, name, *, minimum=1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ParameterError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(value, name="seed") -> int:
    return check_positive_int(value, name, minimum=0)


def check_rank(rank, m, n) -> int:
    rank = check_positive_int(rank, "rank")
    if rank > min(m, n):
        raise ParameterError(f"rank={rank} exceeds min(m, n)={min(m, n)} for a {m}x{n} matrix")
    return rank


def check_real(value, name, *, low=None, high=None, low_open=False, high_open=False) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value}")
    if low is not None and (value < low or (low_open and value == low)):
        raise ParameterError(f"{name}={value} out of range")
    if high is not None and (value > high or (high_open and value == high)):
        raise ParameterError(f"{name}={value} out of range")
    return value


def check_shapes_chain(a: np.ndarray, b: np.ndarray, what="matmul") -> None:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} are not aligned")
