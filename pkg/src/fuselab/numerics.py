"""Dense float64 primitives: sorting with permutation tracking, the stable
softmax family, moments, and a central finite-difference gradient oracle.

All functions are pure and operate on 1-D float64 arrays. Loss math
everywhere in fuselab runs in 64-bit; these helpers enforce that.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, NonFiniteError

Vector = np.ndarray


def as_vector(values: Sequence[float] | np.ndarray) -> Vector:
    """Coerce to a contiguous 1-D float64 array without copying when possible."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def require_finite(v: Vector, what: str = "input") -> Vector:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{what} contains NaN or inf")
    return v


class SortResult(NamedTuple):
    """Descending sort plus the permutation that produced it.

    ``perm[i]`` is the original index of ``sorted[i]``; equal values keep
    their original relative order (tie-break by lower original index).
    """

    values: Vector
    perm: np.ndarray


def sort_descending(v: Sequence[float] | np.ndarray) -> SortResult:
    """Stable descending sort with permutation tracking."""
    v = as_vector(v)
    require_finite(v)
    if v.size == 0:
        return SortResult(v.copy(), np.zeros(0, dtype=np.intp))
    # stable ascending sort of -v keeps ties in original index order
    perm = np.argsort(-v, kind="stable")
    return SortResult(v[perm], perm)


def softmax(z: Sequence[float] | np.ndarray) -> Vector:
    """Max-subtracted softmax."""
    z = as_vector(z)
    if z.size == 0:
        raise EmptyInputError("softmax of empty vector")
    require_finite(z)
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / np.sum(e)


def log_softmax(z: Sequence[float] | np.ndarray) -> Vector:
    """Max-subtracted log-softmax; logsumexp of the output is 0."""
    z = as_vector(z)
    if z.size == 0:
        raise EmptyInputError("log_softmax of empty vector")
    require_finite(z)
    shifted = z - np.max(z)
    return shifted - math.log(np.sum(np.exp(shifted)))


def moments(v: Sequence[float] | np.ndarray) -> tuple[float, float]:
    """Mean and population standard deviation (divide by len, not len-1).

    Population std keeps per-frame standardization reproducible bit-for-bit
    at small K; do not switch to the sample estimator.
    """
    v = as_vector(v)
    if v.size == 0:
        raise EmptyInputError("moments of empty vector")
    mean = float(np.mean(v))
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return mean, std


def finite_difference_gradient(
    f: Callable[[Vector], float],
    x: Sequence[float] | np.ndarray,
    h: float = 1e-5,
) -> Vector:
    """Central-difference gradient (f(x+h*e_i) - f(x-h*e_i)) / 2h.

    The test oracle for every analytic gradient in fuselab; keep it slow
    and obviously correct.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vector(x).copy()
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        f_plus = float(f(x))
        x[i] = orig - h
        f_minus = float(f(x))
        x[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"objective non-finite at probe {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def neumaier_sum(values: Sequence[float] | np.ndarray) -> float:
    """Compensated summation; reduction order changes the result by < 1e-12.

    Used for batch loss reductions so concurrent per-sample evaluation can
    reduce in any order.
    """
    total = 0.0
    comp = 0.0
    for x in values:
        t = total + x
        if abs(total) >= abs(x):
            comp += (total - t) + x
        else:
            comp += (x - t) + total
        total = t
    return total + comp
