"""Shared helpers for the test suite."""

import numpy as np
import pytest

from attnrnn.numeric import make_rng
from attnrnn.verify import rel_err

__all__ = ["rel_err", "random_attention_instance"]


def random_attention_instance(rng, max_n=64, max_d=16, d_v=None):
    """A seeded (query, keys, values) triple with independent widths."""
    n = int(rng.integers(1, max_n + 1))
    d = int(rng.integers(1, max_d + 1))
    dv = d_v if d_v is not None else int(rng.integers(1, max_d + 1))
    return rng.normal(size=d), rng.normal(size=(n, d)), rng.normal(size=(n, dv))


@pytest.fixture
def rng():
    return make_rng(1234)
