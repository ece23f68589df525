"""Shared numeric substrate.

Validated vector/matrix views, the precision policy, a seeded RNG with a
pinned bit generator, the stable softmax used as the high-precision
reference, and the deterministic operation counter threaded through the
streaming kernels.
"""

from __future__ import annotations

import enum

import numpy as np


class DimensionMismatch(ValueError):
    """Operand shapes are incompatible."""


class EmptyInput(ValueError):
    """An operation received an empty vector or token sequence."""


class NonFiniteInput(ValueError):
    """NaN or Inf where finite values are required."""


class InvalidBlockSize(ValueError):
    """Block size must be a positive integer."""


class InvalidConfig(ValueError):
    """A model, benchmark, or task configuration violates its constraints."""


class UnsupportedPrimitive(TypeError):
    """The differentiation tape received an operand it cannot record."""


class NonFiniteGradient(ArithmeticError):
    """A gradient evaluation produced NaN or Inf."""


class DivergedLoss(ArithmeticError):
    """Training loss became NaN or Inf."""


class Precision(enum.Enum):
    """Floating-point width for kernel evaluation.

    Reference computations always run in DOUBLE regardless of the kernel
    precision under test.
    """

    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)


class OpCounter:
    """Deterministic multiply-add counter.

    Streaming kernels increment it at the site of each state-update
    computation; exp and divide evaluations count as one each.  Values depend
    only on shapes, never on data, so counts are reproducible bit-for-bit.
    """

    __slots__ = ("madds",)

    def __init__(self) -> None:
        self.madds = 0

    def add(self, n: int) -> None:
        self.madds += int(n)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator with a pinned bit generator (PCG64).

    The same seed yields the same stream on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _validated(arr: np.ndarray, ndim: int, what: str) -> np.ndarray:
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{what}: expected {ndim}-d, got shape {arr.shape}")
    if arr.size == 0:
        raise EmptyInput(f"{what}: empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{what}: non-finite entries")
    return arr


def as_vector(x, dtype=None) -> np.ndarray:
    """Validate and return a finite, non-empty 1-d float array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return _validated(arr, 1, "vector")


def as_matrix(x, dtype=None) -> np.ndarray:
    """Validate and return a finite, non-empty 2-d float array (row-major)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return _validated(arr, 2, "matrix")


def dot(u: np.ndarray, v: np.ndarray):
    """Inner product of two equal-length vectors.

    Bitwise deterministic across runs for fixed inputs and precision.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionMismatch(f"dot: shapes {u.shape} and {v.shape}")
    return np.dot(u, v)


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product w @ x with shape checking."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"matvec: shapes {w.shape} and {x.shape}")
    return w @ x


def softmax_stable(s: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over a 1-d score vector.

    Shift-invariant: softmax(s + t) == softmax(s) for any scalar t.  Safe for
    score magnitudes far beyond the exp overflow threshold.
    """
    s = np.asarray(s)
    if s.ndim != 1:
        raise DimensionMismatch(f"softmax: expected 1-d, got shape {s.shape}")
    if s.size == 0:
        raise EmptyInput("softmax: empty score vector")
    e = np.exp(s - np.max(s))
    return e / np.sum(e)
