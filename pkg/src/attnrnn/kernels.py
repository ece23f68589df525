"""Many-to-one attention in three computation modes.

A softmax-weighted sum over (key, value) pairs for one fixed query can be
evaluated three ways that agree to rounding:

* ``attention_oracle``     one-shot stable softmax, always double precision;
* ``attention_sequential`` token-at-a-time fold over a constant-size state;
* ``attention_block``      the same fold advancing a block of tokens at once.

The streaming state tracks a running maximum ``m`` of the scores seen so far
and keeps the value sum ``a`` and normalizer ``c`` shifted by ``exp(-m)``, so
no intermediate ever exceeds exp(0).  Rescaling when the maximum moves is what
makes the fold exact:

    m' = max(m, s)
    c' = c * exp(m - m') + exp(s - m')
    a' = a * exp(m - m') + v * exp(s - m')

The fresh state uses m = -inf, which makes the first update land exactly on
(a, c, m) = (v1, 1, s1) for any finite score, including negative ones.
All step functions are pure: they return a new state and never mutate inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numeric
from .numeric import EmptyInput, NonFiniteInput, InvalidBlockSize, OpCounter, Precision


@dataclass(frozen=True)
class AttentionState:
    """Constant-size streaming state for one query.

    a: running max-shifted value sum, length = value width
    c: running max-shifted normalizer, >= 1 after the first update
    m: running maximum score, non-decreasing over a stream
    q: the carried query (a parameter of the stream, not mutable state)
    """

    a: np.ndarray
    c: float
    m: float
    q: np.ndarray

    @property
    def scalar_count(self) -> int:
        """Scalars held per stream: a plus the two accumulators c and m.

        The query is a model parameter, counted once per model, so it is
        excluded here.
        """
        return self.a.shape[0] + 2


def initial_state(q: np.ndarray, value_dim: int, dtype=np.float64) -> AttentionState:
    """Fresh state for a stream of `value_dim`-wide values."""
    q = numeric.as_vector(q, dtype=dtype)
    if value_dim < 1:
        raise EmptyInput("initial_state: value_dim must be >= 1")
    dt = np.dtype(dtype)
    return AttentionState(
        a=np.zeros(value_dim, dtype=dt),
        c=dt.type(0.0),
        m=dt.type(-math.inf),
        q=q,
    )


def score(q: np.ndarray, k: np.ndarray, scaled: bool = False):
    """Dot-product score, optionally scaled by 1/sqrt(key width)."""
    s = numeric.dot(q, k)
    if scaled:
        s = s * (1.0 / math.sqrt(k.shape[0]))
    return s


def rnn_cell_step(
    state: AttentionState,
    k: np.ndarray,
    v: np.ndarray,
    scaled: bool = False,
    counter: OpCounter | None = None,
) -> AttentionState:
    """Advance the streaming state by one (key, value) pair."""
    k = np.asarray(k)
    v = np.asarray(v)
    if k.ndim != 1 or k.shape != state.q.shape:
        raise numeric.DimensionMismatch(
            f"rnn_cell_step: key shape {k.shape} vs query {state.q.shape}"
        )
    if v.ndim != 1 or v.shape != state.a.shape:
        raise numeric.DimensionMismatch(
            f"rnn_cell_step: value shape {v.shape} vs state {state.a.shape}"
        )
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
        raise NonFiniteInput("rnn_cell_step: non-finite key or value")

    s = score(state.q, k, scaled)
    m_new = max(state.m, s)
    # Both exponents are <= 0, so neither factor can overflow.
    e_old = np.exp(state.m - m_new)
    e_new = np.exp(s - m_new)
    c_new = state.c * e_old + e_new
    a_new = state.a * e_old + v * e_new
    if counter is not None:
        # score dot + two exps + c update + a update (two scales and an add).
        counter.add(k.shape[0] + 2 + 2 + 3 * v.shape[0])
    return replace(state, a=a_new, c=c_new, m=m_new)


def state_output(state: AttentionState) -> np.ndarray:
    """Attention output a / c for a state that has absorbed >= 1 token."""
    if state.c <= 0:
        raise EmptyInput("state_output: no tokens absorbed yet")
    return state.a / state.c


def _check_kv(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> None:
    if keys.shape[0] != values.shape[0]:
        raise numeric.DimensionMismatch(
            f"attention: {keys.shape[0]} keys vs {values.shape[0]} values"
        )
    if keys.shape[1] != q.shape[0]:
        raise numeric.DimensionMismatch(
            f"attention: key width {keys.shape[1]} vs query width {q.shape[0]}"
        )


def attention_oracle(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, scaled: bool = False
) -> np.ndarray:
    """One-shot reference: stable softmax over all scores, then weight values.

    Always evaluates in double precision, whatever the inputs.
    """
    q = numeric.as_vector(q, dtype=np.float64)
    keys = numeric.as_matrix(keys, dtype=np.float64)
    values = numeric.as_matrix(values, dtype=np.float64)
    _check_kv(q, keys, values)
    s = keys @ q
    if scaled:
        s = s * (1.0 / math.sqrt(q.shape[0]))
    w = numeric.softmax_stable(s)
    return w @ values


def attention_sequential(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    precision: Precision = Precision.DOUBLE,
    scaled: bool = False,
) -> np.ndarray:
    """Token-at-a-time fold; holds exactly one AttentionState at any time."""
    dt = precision.dtype
    q = numeric.as_vector(q, dtype=dt)
    keys = numeric.as_matrix(keys, dtype=dt)
    values = numeric.as_matrix(values, dtype=dt)
    _check_kv(q, keys, values)
    state = initial_state(q, values.shape[1], dtype=dt)
    for i in range(keys.shape[0]):
        state = rnn_cell_step(state, keys[i], values[i], scaled)
    return state_output(state)


def attention_block(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    block_size: int,
    precision: Precision = Precision.DOUBLE,
    scaled: bool = False,
) -> np.ndarray:
    """Fold advancing `block_size` tokens per state update.

    block_size == 1 executes the same arithmetic as attention_sequential,
    bit for bit.  block_size >= len(keys) is a single-shot stable evaluation.
    The final partial block may be shorter.  Within a block the reduction
    order is fixed (ascending token index), so results are deterministic.
    """
    if not isinstance(block_size, int) or block_size < 1:
        raise InvalidBlockSize(f"block_size must be a positive int, got {block_size!r}")
    dt = precision.dtype
    q = numeric.as_vector(q, dtype=dt)
    keys = numeric.as_matrix(keys, dtype=dt)
    values = numeric.as_matrix(values, dtype=dt)
    _check_kv(q, keys, values)

    n = keys.shape[0]
    a = np.zeros(values.shape[1], dtype=dt)
    c = dt.type(0.0)
    m = dt.type(-math.inf)
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        # Per-token scores through the same dot kernel as the sequential fold
        # keeps the block_size == 1 path bitwise identical to it.
        s = np.array([score(q, keys[i], scaled) for i in range(lo, hi)], dtype=dt)
        m_new = max(m, s.max())
        e = np.exp(s - m_new)
        e_old = np.exp(m - m_new)
        c = c * e_old + e.sum()
        a = a * e_old + e @ values[lo:hi]
        m = m_new
    return a / c
