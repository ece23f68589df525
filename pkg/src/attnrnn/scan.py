"""Inclusive parallel prefix scan and the attention combine operator.

The generic scan works over any associative operator.  It runs the standard
doubling schedule: with offsets 1, 2, 4, ... the round update is

    z'[j] = z[j]                 for j < offset
    z'[j] = op(z[j-offset], z[j])  otherwise

reading every right-hand side from the previous round's buffer, so elements
within a round can be evaluated in any order without changing the result.
ceil(log2 N) rounds produce all N prefixes with O(N log N) operator calls.

Attention rides this scan through a three-field summary of a score/value set:
the maximum score m, the shifted normalizer u and the shifted value sum w.
Merging two disjoint sets rescales each side to the joint maximum:

    m = max(m_lhs, m_rhs)
    u = u_lhs * exp(m_lhs - m) + u_rhs * exp(m_rhs - m)
    w = w_lhs * exp(m_lhs - m) + w_rhs * exp(m_rhs - m)

A single token (s, v) summarizes as (s, 1, v); the prefix output is w / u.
The operator is associative and commutative up to rounding, and every partial
result stays in the same numerically safe range as the sequential fold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from . import kernels, numeric
from .numeric import EmptyInput, NonFiniteInput, Precision

T = TypeVar("T")


@dataclass(frozen=True)
class ScanElement:
    """Summary of a disjoint set of scored values: (max, normalizer, value sum)."""

    m: float
    u: float
    w: np.ndarray


def leaf(s: float, v: np.ndarray, dtype=np.float64) -> ScanElement:
    """Single-token summary (s, 1, v)."""
    dt = np.dtype(dtype)
    v = numeric.as_vector(v, dtype=dt)
    s = dt.type(s)
    if not np.isfinite(s):
        raise NonFiniteInput("leaf: non-finite score")
    return ScanElement(m=s, u=dt.type(1.0), w=v)


def combine(lhs: ScanElement, rhs: ScanElement) -> ScanElement:
    """Merge two disjoint summaries; associative, commutative, total."""
    if lhs.w.shape != rhs.w.shape:
        raise numeric.DimensionMismatch(
            f"combine: value widths {lhs.w.shape} vs {rhs.w.shape}"
        )
    if not (np.isfinite(lhs.m) and np.isfinite(lhs.u) and np.all(np.isfinite(lhs.w))):
        raise NonFiniteInput("combine: non-finite left summary")
    if not (np.isfinite(rhs.m) and np.isfinite(rhs.u) and np.all(np.isfinite(rhs.w))):
        raise NonFiniteInput("combine: non-finite right summary")
    m = max(lhs.m, rhs.m)
    e_l = np.exp(lhs.m - m)
    e_r = np.exp(rhs.m - m)
    return ScanElement(
        m=m,
        u=lhs.u * e_l + rhs.u * e_r,
        w=lhs.w * e_l + rhs.w * e_r,
    )


@dataclass(frozen=True)
class ScanPlan:
    """Doubling schedule for n elements: offsets 1, 2, 4, ... (ceil(log2 n) rounds)."""

    n: int
    rounds: int
    offsets: tuple[int, ...]


def scan_plan(n: int) -> ScanPlan:
    if n < 1:
        raise EmptyInput("scan_plan: n must be >= 1")
    rounds = max(0, math.ceil(math.log2(n))) if n > 1 else 0
    offsets = tuple(1 << r for r in range(rounds))
    return ScanPlan(n=n, rounds=rounds, offsets=offsets)


def inclusive_scan(items: Sequence[T], op: Callable[[T, T], T]) -> list[T]:
    """All prefix reductions of `items` under the associative `op`.

    Output k equals the left fold op(...op(op(x0, x1), x2)..., xk).  Each
    round writes to a fresh buffer, so within-round evaluation order cannot
    affect the result.
    """
    n = len(items)
    if n == 0:
        raise EmptyInput("inclusive_scan: empty input")
    z = list(items)
    for offset in scan_plan(n).offsets:
        z = [z[j] if j < offset else op(z[j - offset], z[j]) for j in range(n)]
    return z


def prefix_attention_elements(
    s: np.ndarray, values: np.ndarray, dtype=np.float64
) -> list[ScanElement]:
    """Scan the attention combine over per-token leaves (s_i, 1, v_i)."""
    s = np.asarray(s)
    values = np.asarray(values)
    if s.ndim != 1 or values.ndim != 2 or s.shape[0] != values.shape[0]:
        raise numeric.DimensionMismatch(
            f"prefix_attention: scores {s.shape} vs values {values.shape}"
        )
    leaves = [leaf(s[i], values[i], dtype=dtype) for i in range(s.shape[0])]
    return inclusive_scan(leaves, combine)


def prefix_attention_outputs(s: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Row k is the attention output over tokens 0..k: w_k / u_k."""
    elements = prefix_attention_elements(s, values, dtype=np.asarray(values).dtype)
    return np.stack([e.w / e.u for e in elements])


def attention_many_to_many(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    precision: Precision = Precision.DOUBLE,
    scaled: bool = False,
) -> np.ndarray:
    """Attention outputs for every prefix of the token sequence at once.

    Row k matches the sequential fold over tokens 0..k; the whole matrix
    costs one scan (O(N log N) combines) instead of N separate folds.
    """
    dt = precision.dtype
    q = numeric.as_vector(q, dtype=dt)
    keys = numeric.as_matrix(keys, dtype=dt)
    values = numeric.as_matrix(values, dtype=dt)
    kernels._check_kv(q, keys, values)
    s = np.array(
        [kernels.score(q, keys[i], scaled) for i in range(keys.shape[0])], dtype=dt
    )
    return prefix_attention_outputs(s, values)


def naive_many_to_many(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, scaled: bool = False
) -> np.ndarray:
    """Reference: one independent oracle evaluation per prefix (double)."""
    keys = numeric.as_matrix(keys, dtype=np.float64)
    values = numeric.as_matrix(values, dtype=np.float64)
    return np.stack(
        [
            kernels.attention_oracle(q, keys[: i + 1], values[: i + 1], scaled)
            for i in range(keys.shape[0])
        ]
    )
