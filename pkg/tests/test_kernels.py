"""Streaming attention cell and the fold/block evaluators against the oracle."""

import math

import numpy as np
import pytest

from attnrnn import kernels
from attnrnn.numeric import (
    DimensionMismatch,
    EmptyInput,
    InvalidBlockSize,
    NonFiniteInput,
    Precision,
    make_rng,
)
from attnrnn.verify import _attention_unshifted

from conftest import random_attention_instance, rel_err


def sequential(q, K, V, **kw):
    return kernels.attention_sequential(q, K, V, **kw)


class TestCellStep:
    def test_first_token_score_zero(self):
        # One token with score 0 and value [5] must land exactly on
        # accumulator [5], normalizer 1, running max 0.
        st = kernels.initial_state(np.array([1.0]), value_dim=1)
        st = kernels.rnn_cell_step(st, np.array([0.0]), np.array([5.0]))
        assert st.a.tolist() == [5.0]
        assert float(st.c) == 1.0
        assert float(st.m) == 0.0

    def test_first_token_negative_score_is_exact(self):
        # The empty state carries running max -inf, so exp(-inf) = 0 wipes
        # the old terms and the first token lands exactly on (v, 1, s).
        st = kernels.initial_state(np.array([1.0]), value_dim=2)
        st = kernels.rnn_cell_step(st, np.array([-7.25]), np.array([3.0, -4.0]))
        assert st.a.tolist() == [3.0, -4.0]
        assert float(st.c) == 1.0
        assert float(st.m) == -7.25

    def test_two_equal_scores_average_values(self):
        # Scores 3 and 3 with values [1] and [3]: output (1+3)/2 = [2].
        q = np.array([3.0])
        st = kernels.initial_state(q, value_dim=1)
        st = kernels.rnn_cell_step(st, np.array([1.0]), np.array([1.0]))
        st = kernels.rnn_cell_step(st, np.array([1.0]), np.array([3.0]))
        assert kernels.state_output(st).tolist() == [2.0]

    def test_normalizer_at_least_one_and_max_monotone(self, rng):
        q = rng.normal(size=4)
        st = kernels.initial_state(q, value_dim=3)
        prev_m = -math.inf
        for _ in range(50):
            st = kernels.rnn_cell_step(st, rng.normal(size=4), rng.normal(size=3))
            assert float(st.c) >= 1.0
            assert float(st.m) >= prev_m
            prev_m = float(st.m)

    def test_output_before_any_token_rejected(self):
        st = kernels.initial_state(np.array([1.0]), value_dim=1)
        with pytest.raises(EmptyInput):
            kernels.state_output(st)

    def test_non_finite_key_rejected(self):
        st = kernels.initial_state(np.array([1.0]), value_dim=1)
        with pytest.raises(NonFiniteInput):
            kernels.rnn_cell_step(st, np.array([np.nan]), np.array([1.0]))

    def test_mismatched_key_rejected(self):
        st = kernels.initial_state(np.array([1.0, 2.0]), value_dim=1)
        with pytest.raises(DimensionMismatch):
            kernels.rnn_cell_step(st, np.array([1.0]), np.array([1.0]))

    def test_state_scalar_count_excludes_query(self):
        st = kernels.initial_state(np.array([1.0, 2.0, 3.0]), value_dim=5)
        # accumulator (5) + normalizer + running max; the query is a
        # parameter, not state.
        assert st.scalar_count == 7

    def test_madds_per_step_constant(self, rng):
        from attnrnn.numeric import OpCounter

        counter = OpCounter()
        st = kernels.initial_state(rng.normal(size=4), value_dim=6)
        costs = []
        for _ in range(10):
            before = counter.madds
            st = kernels.rnn_cell_step(st, rng.normal(size=4), rng.normal(size=6), counter=counter)
            costs.append(counter.madds - before)
        assert len(set(costs)) == 1
        assert costs[0] == 4 + 2 + 2 + 3 * 6


class TestOracle:
    def test_single_token_returns_value_exactly(self, rng):
        q, K, V = rng.normal(size=3), rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
        assert np.array_equal(kernels.attention_oracle(q, K, V), V[0])

    def test_equal_scores_give_column_mean(self, rng):
        # Identical keys make every score equal, so the output is the
        # plain average of the value rows.
        q = rng.normal(size=3)
        K = np.tile(rng.normal(size=3), (4, 1))
        V = rng.normal(size=(4, 5))
        assert rel_err(kernels.attention_oracle(q, K, V), V.mean(axis=0)) <= 1e-15

    def test_matches_direct_summation_at_small_scale(self, rng):
        # At benign magnitudes the unshifted rolling sums are a valid
        # independent reference.
        for _ in range(25):
            q, K, V = random_attention_instance(rng, max_n=24, max_d=8)
            want = _attention_unshifted(q, K, V)
            assert rel_err(kernels.attention_oracle(q, K, V), want) <= 1e-12

    def test_key_value_count_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            kernels.attention_oracle(np.ones(2), np.ones((3, 2)), np.ones((4, 2)))

    def test_empty_keys_rejected(self):
        with pytest.raises(EmptyInput):
            kernels.attention_oracle(np.ones(2), np.ones((0, 2)), np.ones((0, 2)))


class TestSequentialFold:
    def test_matches_oracle_double(self, rng):
        for _ in range(200):
            q, K, V = random_attention_instance(rng)
            assert rel_err(sequential(q, K, V), kernels.attention_oracle(q, K, V)) <= 1e-12

    def test_matches_oracle_single(self, rng):
        for _ in range(100):
            q, K, V = random_attention_instance(rng)
            got = sequential(q, K, V, precision=Precision.SINGLE)
            assert got.dtype == np.float32
            assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-5

    def test_scaled_scores_match_scaled_oracle(self, rng):
        for _ in range(50):
            q, K, V = random_attention_instance(rng)
            got = sequential(q, K, V, scaled=True)
            assert rel_err(got, kernels.attention_oracle(q, K, V, scaled=True)) <= 1e-12

    def test_permutation_invariance(self, rng):
        for _ in range(50):
            q, K, V = random_attention_instance(rng, max_n=32)
            perm = rng.permutation(K.shape[0])
            a = sequential(q, K, V)
            b = sequential(q, K[perm], V[perm])
            assert rel_err(a, b) <= 1e-12

    def test_huge_scores_stay_finite_and_correct(self, rng):
        # Score magnitudes around 1e4 overflow a direct exp; the shifted
        # fold must stay finite and still agree with the stable oracle.
        q = np.array([100.0, -100.0])
        K = rng.normal(size=(20, 2)) * 100.0
        V = rng.normal(size=(20, 3))
        got = sequential(q, K, V)
        assert np.all(np.isfinite(got))
        assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-12
        got32 = sequential(q, K, V, precision=Precision.SINGLE)
        assert np.all(np.isfinite(got32))
        assert rel_err(got32, kernels.attention_oracle(q, K, V)) <= 1e-5

    def test_unshifted_reference_breaks_where_fold_does_not(self, rng):
        q = np.array([100.0, -100.0])
        K = rng.normal(size=(20, 2)) * 100.0
        V = rng.normal(size=(20, 3))
        ref = _attention_unshifted(q, K, V)
        assert not np.all(np.isfinite(ref))


class TestBlockFold:
    def test_block_one_is_bitwise_sequential(self, rng):
        for _ in range(30):
            q, K, V = random_attention_instance(rng, max_n=32)
            a = sequential(q, K, V)
            b = kernels.attention_block(q, K, V, block_size=1)
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("block_size", [2, 3, 8])
    def test_matches_oracle(self, rng, block_size):
        for _ in range(60):
            q, K, V = random_attention_instance(rng, max_n=40)
            got = kernels.attention_block(q, K, V, block_size=block_size)
            assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-12

    def test_block_covering_everything_matches_oracle(self, rng):
        q, K, V = random_attention_instance(rng, max_n=17)
        got = kernels.attention_block(q, K, V, block_size=K.shape[0] + 5)
        assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-12

    def test_partial_final_block(self, rng):
        # 7 tokens in blocks of 3 leaves a final block of 1.
        q, K, V = rng.normal(size=4), rng.normal(size=(7, 4)), rng.normal(size=(7, 2))
        got = kernels.attention_block(q, K, V, block_size=3)
        assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-12

    def test_huge_scores_stay_finite(self, rng):
        q = np.array([100.0, -100.0])
        K = rng.normal(size=(21, 2)) * 100.0
        V = rng.normal(size=(21, 3))
        got = kernels.attention_block(q, K, V, block_size=4)
        assert np.all(np.isfinite(got))
        assert rel_err(got, kernels.attention_oracle(q, K, V)) <= 1e-12

    @pytest.mark.parametrize("bad", [0, -1, 2.5, "3"])
    def test_bad_block_size_rejected(self, bad):
        with pytest.raises(InvalidBlockSize):
            kernels.attention_block(np.ones(2), np.ones((4, 2)), np.ones((4, 2)), bad)


class TestDeterminism:
    def test_same_inputs_same_bits(self):
        rng = make_rng(99)
        q, K, V = rng.normal(size=5), rng.normal(size=(13, 5)), rng.normal(size=(13, 4))
        runs = [sequential(q, K, V) for _ in range(3)]
        assert np.array_equal(runs[0], runs[1])
        assert np.array_equal(runs[0], runs[2])
        blocks = [kernels.attention_block(q, K, V, 4) for _ in range(2)]
        assert np.array_equal(blocks[0], blocks[1])
