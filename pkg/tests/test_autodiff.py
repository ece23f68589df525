"""Tape-based reverse mode: primitives, gradcheck, attention graphs."""

import numpy as np
import pytest

from attnrnn import autodiff as ad
from attnrnn import scan
from attnrnn.numeric import NonFiniteGradient, UnsupportedPrimitive, make_rng

from conftest import rel_err


class TestTapeBasics:
    def test_quadratic_gradient_is_exact(self):
        # d/dx sum(x*x)/2 = x; central differences agree to ~1e-9.
        def f(params, inputs):
            return ad.mul(0.5, ad.sum_all(ad.mul(params[0], params[0])))

        x = np.array([1.0, -2.0, 3.0])
        report = ad.gradcheck(f, [x], inputs=[])
        assert report.max_rel_error <= 1e-9
        assert report.precision == "double"
        assert report.step == 1e-5

    def test_untaped_call_returns_plain_value(self):
        # Primitives evaluate eagerly on raw arrays; no tape, no wrapper.
        out = ad.add(np.array([1.0]), np.array([2.0]))
        assert isinstance(out, np.ndarray)
        assert out.tolist() == [3.0]

    def test_taped_forward_is_bitwise_untaped(self, rng):
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(5, 3))

        def f(params, inputs):
            return ad.sum_all(ad.tanh(ad.linear(inputs[0], params[0])))

        plain = float(np.sum(np.tanh(x @ w.T)))
        taped, _ = ad.forward_with_tape(f, [w], [x])
        assert taped == plain

    def test_backward_with_no_params(self):
        def f(params, inputs):
            return ad.sum_all(np.ones(3))

        loss, tape = ad.forward_with_tape(f, [], [])
        assert loss == 3.0
        assert ad.backward(tape) == []

    def test_node_operator_sugar(self):
        t = ad.Tape()
        x = t.leaf(np.array([2.0, 4.0]))
        y = (x + 1.0) * x - x / 2.0
        t.output = ad.sum_all(y)
        (g,) = t.gradients(t.output, [x])
        # d/dx (x^2 + x - x/2) = 2x + 1/2
        assert rel_err(g, 2.0 * np.array([2.0, 4.0]) + 0.5) <= 1e-12

    def test_string_operand_rejected(self):
        with pytest.raises(UnsupportedPrimitive):
            ad.add(np.array([1.0]), "nope")

    def test_complex_operand_rejected(self):
        with pytest.raises(UnsupportedPrimitive):
            ad.exp(np.array([1.0 + 2.0j]))

    def test_nodes_from_different_tapes_rejected(self):
        a = ad.Tape().leaf(np.array([1.0]))
        b = ad.Tape().leaf(np.array([1.0]))
        with pytest.raises(UnsupportedPrimitive):
            ad.add(a, b)

    def test_non_finite_gradient_raises(self):
        def f(params, inputs):
            return ad.sum_all(ad.exp(ad.mul(params[0], 1000.0)))

        with np.errstate(over="ignore"), pytest.raises(NonFiniteGradient):
            ad.gradcheck(f, [np.array([1.0])], inputs=[])


class TestSubgradients:
    def test_max_routes_to_earliest_maximal_index(self):
        t = ad.Tape()
        x = t.leaf(np.array([3.0, 5.0, 5.0]))
        t.output = ad.max_all(x)
        (g,) = t.gradients(t.output, [x])
        assert g.tolist() == [0.0, 1.0, 0.0]

    def test_scalar_max_tie_routes_left(self):
        t = ad.Tape()
        a = t.leaf(np.float64(2.0))
        b = t.leaf(np.float64(2.0))
        t.output = ad.scalar_max(a, b)
        ga, gb = t.gradients(t.output, [a, b])
        assert float(ga) == 1.0
        assert float(gb) == 0.0


class TestPrimitiveGradients:
    def test_structural_ops_gradcheck(self, rng):
        # Slicing, concatenation, and stacking routed through a smooth
        # readout; exercises the scatter-style adjoints.
        x = rng.normal(size=(4, 6))

        def f(params, inputs):
            p = params[0]
            left = ad.take_cols(p, 0, 3)
            right = ad.take_cols(p, 3, 6)
            merged = ad.concat_cols(left, right)
            row = ad.get_row(merged, 2)
            piece = ad.take_slice(row, 1, 5)
            return ad.sum_all(ad.tanh(piece))

        assert ad.gradcheck(f, [x], inputs=[]).max_rel_error <= 1e-8

    def test_layernorm_gradcheck(self, rng):
        x = rng.normal(size=(3, 5))
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)

        def f(params, inputs):
            return ad.sum_all(ad.tanh(ad.layernorm(params[0], params[1], params[2])))

        assert ad.gradcheck(f, [x, gain, bias], inputs=[]).max_rel_error <= 1e-7

    def test_linear_and_dot_gradcheck(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(2, 4))

        def f(params, inputs):
            y = ad.linear(inputs[0], params[0])
            row = ad.get_row(y, 1)
            return ad.dot(row, row)

        assert ad.gradcheck(f, [w], inputs=[x]).max_rel_error <= 1e-8

    def test_matvec_vecmat_gradcheck(self, rng):
        w = rng.normal(size=(3, 4))
        v = rng.normal(size=4)
        u = rng.normal(size=3)

        def f(params, inputs):
            y = ad.matvec(params[0], params[1])
            z = ad.vecmat(inputs[0], params[0])
            return ad.add(ad.dot(y, y), ad.dot(z, z))

        assert ad.gradcheck(f, [w, v], inputs=[u]).max_rel_error <= 1e-8


class TestAttentionGraphs:
    def test_single_token_loss_gradient_equals_output(self, rng):
        # With one token the attention output o equals its value row v
        # for any score, so d(0.5 * ||o||^2)/dv = o and d/ds = 0.
        v = rng.normal(size=(1, 3))
        s = np.array([0.37])

        def f(params, inputs):
            out = ad.prefix_attention_scan_graph(params[0], params[1])
            return ad.mul(0.5, ad.sum_all(ad.mul(out, out)))

        loss, tape = ad.forward_with_tape(f, [s, v], [])
        gs, gv = ad.backward(tape)
        assert rel_err(gv, v) <= 1e-12
        assert abs(float(gs[0])) <= 1e-15
        assert abs(loss - 0.5 * float(np.sum(v * v))) <= 1e-15

    def test_three_token_gradient_matches_hand_jacobian(self, rng):
        # Weighted-sum readout g . o_last: the classical softmax Jacobian
        # gives ds_i = p_i (g . v_i - g . o) and dV_i = p_i g.
        s = rng.normal(size=3)
        V = rng.normal(size=(3, 2))
        g = rng.normal(size=2)

        def f(params, inputs):
            out = ad.prefix_attention_scan_graph(params[0], params[1])
            last = ad.get_row(out, 2)
            return ad.dot(last, inputs[0])

        _, tape = ad.forward_with_tape(f, [s, V], [g])
        gs, gV = ad.backward(tape)

        e = np.exp(s - np.max(s))
        p = e / e.sum()
        o = p @ V
        want_s = p * (V @ g - float(o @ g))
        want_V = np.outer(p, g)
        assert rel_err(gs, want_s) <= 1e-12
        assert rel_err(gV, want_V) <= 1e-12

    def test_scan_direct_and_fused_gradients_agree(self, rng):
        from attnrnn.aaren import prefix_attention

        n, dv = 16, 3
        s = rng.normal(size=n) * 2.0
        V = rng.normal(size=(n, dv))
        G = rng.normal(size=(n, dv))

        grads = {}
        for name, graph in (
            ("scan", ad.prefix_attention_scan_graph),
            ("direct", ad.prefix_attention_direct_graph),
            ("fused", prefix_attention),
        ):
            def f(params, inputs, graph=graph):
                out = graph(params[0], params[1])
                return ad.sum_all(ad.mul(out, inputs[0]))

            _, tape = ad.forward_with_tape(f, [s, V], [G])
            grads[name] = ad.backward(tape)

        for key in ("direct", "fused"):
            assert rel_err(grads[key][0], grads["scan"][0]) <= 1e-8
            assert rel_err(grads[key][1], grads["scan"][1]) <= 1e-8

    def test_attention_graphs_forward_parity(self, rng):
        from attnrnn.aaren import prefix_attention

        s = rng.normal(size=9)
        V = rng.normal(size=(9, 4))
        want = scan.prefix_attention_outputs(s, V)
        assert np.array_equal(prefix_attention(s, V), want)
        assert rel_err(ad.prefix_attention_scan_graph(s, V), want) <= 1e-12
        assert rel_err(ad.prefix_attention_direct_graph(s, V), want) <= 1e-12

    def test_fused_gradcheck(self, rng):
        s = rng.normal(size=5)
        V = rng.normal(size=(5, 2))
        from attnrnn.aaren import prefix_attention

        def f(params, inputs):
            out = prefix_attention(params[0], params[1])
            return ad.sum_all(ad.tanh(out))

        assert ad.gradcheck(f, [s, V], inputs=[]).max_rel_error <= 1e-6


class TestGradReport:
    def test_per_param_worst_errors_reported(self, rng):
        x = rng.normal(size=3)
        y = rng.normal(size=4)

        def f(params, inputs):
            return ad.add(ad.dot(params[0], params[0]), ad.dot(params[1], params[1]))

        report = ad.gradcheck(f, [x, y], inputs=[])
        assert len(report.per_param) == 2
        assert report.max_rel_error == max(report.per_param)
