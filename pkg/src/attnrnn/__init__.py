"""Attention evaluated as a recurrent network.

One softmax-weighted aggregation, three interchangeable computations:
a token-at-a-time fold over a constant-size state, a block-at-a-time fold,
and a parallel prefix scan that yields every prefix's output at once.  On top
of the kernels: a stackable streaming attention model, a KV-cache causal
baseline, a small reverse-mode tape for training both, a deterministic
benchmark harness, and toy tasks.
"""

from .numeric import (
    DimensionMismatch,
    DivergedLoss,
    EmptyInput,
    InvalidBlockSize,
    InvalidConfig,
    NonFiniteGradient,
    NonFiniteInput,
    OpCounter,
    Precision,
    UnsupportedPrimitive,
    make_rng,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "DivergedLoss",
    "EmptyInput",
    "InvalidBlockSize",
    "InvalidConfig",
    "NonFiniteGradient",
    "NonFiniteInput",
    "OpCounter",
    "Precision",
    "UnsupportedPrimitive",
    "make_rng",
    "__version__",
]
