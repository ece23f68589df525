"""Associative prefix combine and the generic inclusive scan."""

import math
import operator

import numpy as np
import pytest

from attnrnn import kernels, scan
from attnrnn.numeric import (
    DimensionMismatch,
    EmptyInput,
    NonFiniteInput,
    Precision,
    make_rng,
)

from conftest import random_attention_instance, rel_err


class TestCombine:
    def test_worked_example(self):
        # (m=1, u=1, w=[2]) with (m=0, u=1, w=[4]): the second operand is
        # discounted by exp(0 - 1), the first keeps weight exp(0) = 1.
        left = scan.ScanElement(m=1.0, u=1.0, w=np.array([2.0]))
        right = scan.ScanElement(m=0.0, u=1.0, w=np.array([4.0]))
        out = scan.combine(left, right)
        assert out.m == 1.0
        assert out.u == 1.0 + math.exp(-1.0)
        assert out.w.tolist() == [2.0 + 4.0 * math.exp(-1.0)]

    def test_equal_maxima_add_exactly(self):
        left = scan.ScanElement(m=0.0, u=1.0, w=np.array([1.0]))
        right = scan.ScanElement(m=0.0, u=1.0, w=np.array([3.0]))
        out = scan.combine(left, right)
        assert out.m == 0.0
        assert out.u == 2.0
        assert out.w.tolist() == [4.0]

    def test_commutes_bitwise(self, rng):
        for _ in range(100):
            x = scan.ScanElement(m=float(rng.normal()), u=float(rng.uniform(0.5, 2.0)), w=rng.normal(size=3))
            y = scan.ScanElement(m=float(rng.normal()), u=float(rng.uniform(0.5, 2.0)), w=rng.normal(size=3))
            a, b = scan.combine(x, y), scan.combine(y, x)
            assert a.m == b.m and a.u == b.u and np.array_equal(a.w, b.w)

    def test_associative_within_tolerance(self, rng):
        worst = 0.0
        for _ in range(1000):
            x, y, z = (
                scan.ScanElement(m=float(rng.uniform(-350, 350)), u=float(rng.uniform(0.5, 2.0)), w=rng.normal(size=4))
                for _ in range(3)
            )
            lhs = scan.combine(scan.combine(x, y), z)
            rhs = scan.combine(x, scan.combine(y, z))
            worst = max(worst, abs(lhs.m - rhs.m), rel_err(lhs.u, rhs.u), rel_err(lhs.w, rhs.w))
        assert worst <= 1e-12

    def test_extreme_max_gap_underflows_cleanly(self):
        # A 750-unit gap drives the discounted side to exactly zero; the
        # result must stay finite with the dominant side intact.
        hi = scan.ScanElement(m=400.0, u=1.0, w=np.array([2.0]))
        lo = scan.ScanElement(m=-350.0, u=1.0, w=np.array([9.0]))
        out = scan.combine(hi, lo)
        assert out.m == 400.0
        assert out.u == 1.0
        assert out.w.tolist() == [2.0]

    def test_shape_mismatch_rejected(self):
        a = scan.ScanElement(m=0.0, u=1.0, w=np.zeros(2))
        b = scan.ScanElement(m=0.0, u=1.0, w=np.zeros(3))
        with pytest.raises(DimensionMismatch):
            scan.combine(a, b)

    def test_non_finite_rejected(self):
        a = scan.ScanElement(m=0.0, u=1.0, w=np.array([np.nan]))
        b = scan.ScanElement(m=0.0, u=1.0, w=np.array([1.0]))
        with pytest.raises(NonFiniteInput):
            scan.combine(a, b)


class TestScanPlan:
    @pytest.mark.parametrize(
        "n,rounds", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (33, 6), (512, 9)]
    )
    def test_round_count_is_log2_ceiling(self, n, rounds):
        plan = scan.scan_plan(n)
        assert plan.rounds == rounds
        assert list(plan.offsets) == [1 << r for r in range(rounds)]

    def test_non_positive_rejected(self):
        with pytest.raises(EmptyInput):
            scan.scan_plan(0)


class TestInclusiveScan:
    def test_running_sum_of_one_two_three(self):
        assert scan.inclusive_scan([1, 2, 3], operator.add) == [1, 3, 6]

    def test_running_max(self):
        assert scan.inclusive_scan([3, 1, 4, 1, 5], max) == [3, 3, 4, 4, 5]

    def test_singleton(self):
        assert scan.inclusive_scan([7], operator.add) == [7]

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            scan.inclusive_scan([], operator.add)

    @pytest.mark.parametrize("n", [2, 3, 5, 16, 31, 33, 100])
    def test_matches_left_fold(self, rng, n):
        xs = [float(v) for v in rng.normal(size=n)]
        want = []
        acc = None
        for x in xs:
            acc = x if acc is None else acc + x
            want.append(acc)
        got = scan.inclusive_scan(xs, operator.add)
        assert rel_err(np.array(got), np.array(want)) <= 1e-12


class TestPrefixAttention:
    def test_scan_state_matches_recurrence_per_prefix(self, rng):
        # Scanned (max, normalizer, accumulator) triples must match the
        # one-token-at-a-time recurrence at every prefix length.
        for _ in range(100):
            n = int(rng.integers(1, 40))
            s = rng.normal(size=n) * 3.0
            V = rng.normal(size=(n, 3))
            els = scan.prefix_attention_elements(s, V)

            st = kernels.initial_state(np.array([1.0]), value_dim=3)
            for k in range(n):
                st = kernels.rnn_cell_step(st, np.array([s[k]]), V[k])
                assert abs(els[k].m - float(st.m)) <= 1e-12
                assert rel_err(els[k].u, float(st.c)) <= 1e-12
                assert rel_err(els[k].w, st.a) <= 1e-12

    def test_outputs_at_thirty_three_match_fold(self, rng):
        # 33 items forces a ragged final round (6 rounds for a non power
        # of two); every prefix output must still equal the left fold.
        # Built from raw leaves here to exercise leaf + inclusive_scan
        # directly rather than the packaged helper.
        n = 33
        s = rng.normal(size=n)
        V = rng.normal(size=(n, 4))
        leaves = [scan.leaf(float(s[i]), V[i]) for i in range(n)]
        els = scan.inclusive_scan(leaves, scan.combine)
        got = np.stack([e.w / e.u for e in els])
        st = kernels.initial_state(np.array([1.0]), value_dim=4)
        for k in range(n):
            st = kernels.rnn_cell_step(st, np.array([s[k]]), V[k])
            assert rel_err(got[k], kernels.state_output(st)) <= 1e-12

    def test_deterministic_across_runs(self, rng):
        s = rng.normal(size=19)
        V = rng.normal(size=(19, 2))
        assert np.array_equal(scan.prefix_attention_outputs(s, V), scan.prefix_attention_outputs(s, V))


class TestManyToMany:
    def test_matches_naive_per_prefix(self, rng):
        for _ in range(20):
            q, K, V = random_attention_instance(rng, max_n=48)
            got = scan.attention_many_to_many(q, K, V)
            want = scan.naive_many_to_many(q, K, V)
            assert rel_err(got, want) <= 1e-12

    def test_single_token_returns_value(self, rng):
        q, K, V = rng.normal(size=3), rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
        got = scan.attention_many_to_many(q, K, V)
        assert got.shape == (1, 2)
        assert rel_err(got[0], V[0]) <= 1e-15

    def test_last_row_is_full_attention(self, rng):
        q, K, V = random_attention_instance(rng, max_n=30)
        got = scan.attention_many_to_many(q, K, V)
        assert rel_err(got[-1], kernels.attention_oracle(q, K, V)) <= 1e-12

    def test_single_precision_tracks_oracle(self, rng):
        q, K, V = random_attention_instance(rng, max_n=30)
        got = scan.attention_many_to_many(q, K, V, precision=Precision.SINGLE)
        assert got.dtype == np.float32
        assert rel_err(got[-1], kernels.attention_oracle(q, K, V)) <= 1e-5

    def test_huge_scores_stay_finite(self, rng):
        q = np.array([100.0, -100.0])
        K = rng.normal(size=(16, 2)) * 100.0
        V = rng.normal(size=(16, 2))
        got = scan.attention_many_to_many(q, K, V)
        assert np.all(np.isfinite(got))
        assert rel_err(got, scan.naive_many_to_many(q, K, V)) <= 1e-12
