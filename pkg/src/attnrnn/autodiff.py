"""Reverse-mode differentiation over the small op set the models use.

Every operation here dispatches on its arguments: given plain numpy arrays it
just computes, given tape Nodes it computes the same values and records a
backward rule.  Model forwards are therefore written once and run identically
taped and untaped, so recording can never perturb values.

Supported operations: add/sub/mul/div, exp, tanh, dot, matvec, vecmat, linear,
sum/max reductions, scalar max, slicing/stacking plumbing, layernorm, and any
fused primitive registered through define_primitive (the attention layers
register theirs next to their forward kernels).  Anything else raises
UnsupportedPrimitive.

Gradient conventions: max routes its subgradient entirely to the earliest
maximal index.  The fused attention primitives use backward rules derived from
the unshifted softmax expression; the max shift in their forward kernels
cancels in the normalized output, so it contributes no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan
from .numeric import NonFiniteGradient, UnsupportedPrimitive


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape")

    def __init__(self, value: np.ndarray, tape: "Tape") -> None:
        self.value = value
        self.tape = tape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Node(shape={np.shape(self.value)})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self._entries: list[tuple[Node, tuple[Node, ...], callable]] = []
        self.params: list[Node] = []
        self.output: Node | None = None

    def leaf(self, value) -> Node:
        return Node(np.asarray(value), self)

    def _record(self, value, inputs: tuple[Node, ...], vjp) -> Node:
        out = Node(value, self)
        self._entries.append((out, inputs, vjp))
        return out

    def gradients(self, output: Node, wrt: list[Node]) -> list[np.ndarray]:
        """Accumulated gradients of a scalar output for the given nodes."""
        grads: dict[int, np.ndarray] = {id(output): np.float64(1.0)}
        for out, inputs, vjp in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            for node, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(node)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(n), np.zeros_like(n.value)) for n in wrt]


def _coerce(x):
    """Raw value of an operand; rejects types the tape cannot differentiate."""
    if isinstance(x, Node):
        x = x.value
    if isinstance(x, (bool, str, complex)):
        raise UnsupportedPrimitive(f"unsupported operand type {type(x).__name__}")
    if isinstance(x, (int, float, np.floating, np.integer)):
        return x
    if isinstance(x, np.ndarray):
        if x.dtype.kind not in "fi":
            raise UnsupportedPrimitive(f"unsupported array dtype {x.dtype}")
        return x
    raise UnsupportedPrimitive(f"unsupported operand type {type(x).__name__}")


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise UnsupportedPrimitive("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape: tuple[int, ...]):
    """Reduce an upstream gradient back to the shape of a broadcast operand."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


class Primitive:
    """A differentiable operation: a forward on raw values plus its vjp.

    The vjp receives (raw args, forward output, upstream gradient) and returns
    one gradient per argument (None for non-differentiable arguments such as
    indices).
    """

    __slots__ = ("name", "_forward", "_vjp")

    def __init__(self, name, forward, vjp) -> None:
        self.name = name
        self._forward = forward
        self._vjp = vjp

    def __call__(self, *args):
        tape = _tape_of(args)
        raws = tuple(_coerce(a) for a in args)
        y = self._forward(*raws)
        if tape is None:
            return y
        nodes = tuple(a for a in args if isinstance(a, Node))
        node_pos = tuple(i for i, a in enumerate(args) if isinstance(a, Node))
        vjp = self._vjp

        def backward(g, raws=raws, y=y):
            full = vjp(raws, y, g)
            return tuple(full[i] for i in node_pos)

        return tape._record(y, nodes, backward)


def define_primitive(name, forward, vjp) -> Primitive:
    """Register a fused differentiable operation."""
    return Primitive(name, forward, vjp)


def _shape(x) -> tuple[int, ...]:
    return np.shape(x)


add = define_primitive(
    "add",
    lambda a, b: a + b,
    lambda args, y, g: (
        _unbroadcast(g, _shape(args[0])),
        _unbroadcast(g, _shape(args[1])),
    ),
)

sub = define_primitive(
    "sub",
    lambda a, b: a - b,
    lambda args, y, g: (
        _unbroadcast(g, _shape(args[0])),
        _unbroadcast(-g, _shape(args[1])),
    ),
)

mul = define_primitive(
    "mul",
    lambda a, b: a * b,
    lambda args, y, g: (
        _unbroadcast(g * args[1], _shape(args[0])),
        _unbroadcast(g * args[0], _shape(args[1])),
    ),
)

div = define_primitive(
    "div",
    lambda a, b: a / b,
    lambda args, y, g: (
        _unbroadcast(g / args[1], _shape(args[0])),
        _unbroadcast(-g * args[0] / (args[1] * args[1]), _shape(args[1])),
    ),
)

exp = define_primitive("exp", np.exp, lambda args, y, g: (g * y,))

tanh = define_primitive("tanh", np.tanh, lambda args, y, g: (g * (1.0 - y * y),))

dot = define_primitive(
    "dot",
    lambda u, v: np.dot(u, v),
    lambda args, y, g: (g * args[1], g * args[0]),
)

matvec = define_primitive(
    "matvec",
    lambda w, x: w @ x,
    lambda args, y, g: (np.outer(g, args[1]), args[0].T @ g),
)

vecmat = define_primitive(
    "vecmat",
    lambda v, m: v @ m,
    lambda args, y, g: (args[1] @ g, np.outer(args[0], g)),
)

# Row-wise affine map X @ W.T, the shape every projection in the models uses.
linear = define_primitive(
    "linear",
    lambda x, w: x @ w.T,
    lambda args, y, g: (g @ args[1], g.T @ args[0]),
)

sum_all = define_primitive(
    "sum_all",
    np.sum,
    lambda args, y, g: (g * np.ones_like(args[0]),),
)


def _max_all_vjp(args, y, g):
    z = np.zeros_like(args[0])
    z.reshape(-1)[int(np.argmax(args[0]))] = g  # earliest maximal index
    return (z,)


max_all = define_primitive("max_all", np.max, _max_all_vjp)

scalar_max = define_primitive(
    "scalar_max",
    lambda a, b: max(a, b),
    # Ties route the whole subgradient to the earlier operand.
    lambda args, y, g: (
        g if args[0] >= args[1] else np.float64(0.0),
        g if args[1] > args[0] else np.float64(0.0),
    ),
)


def _scatter_like(template, region, g):
    z = np.zeros_like(template)
    z[region] = g
    return z


get_item = define_primitive(
    "get_item",
    lambda x, i: x[i],
    lambda args, y, g: (_scatter_like(args[0], args[1], g), None),
)

get_row = define_primitive(
    "get_row",
    lambda x, i: x[i],
    lambda args, y, g: (_scatter_like(args[0], args[1], g), None),
)

take_slice = define_primitive(
    "take_slice",
    lambda x, lo, hi: x[lo:hi],
    lambda args, y, g: (_scatter_like(args[0], slice(args[1], args[2]), g), None, None),
)

take_rows = define_primitive(
    "take_rows",
    lambda x, lo, hi: x[lo:hi],
    lambda args, y, g: (_scatter_like(args[0], slice(args[1], args[2]), g), None, None),
)

take_cols = define_primitive(
    "take_cols",
    lambda x, lo, hi: x[:, lo:hi],
    lambda args, y, g: (
        _scatter_like(args[0], (slice(None), slice(args[1], args[2])), g),
        None,
        None,
    ),
)


def _concat_cols_vjp(args, y, g):
    grads = []
    lo = 0
    for a in args:
        hi = lo + a.shape[1]
        grads.append(g[:, lo:hi])
        lo = hi
    return tuple(grads)


concat_cols = define_primitive(
    "concat_cols",
    lambda *parts: np.concatenate(parts, axis=1),
    _concat_cols_vjp,
)

stack_rows = define_primitive(
    "stack_rows",
    lambda *rows: np.stack(rows),
    lambda args, y, g: tuple(g[i] for i in range(len(args))),
)


_LN_EPS = 1e-5


def _layernorm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + _LN_EPS)
    return xhat * gain + bias


def _layernorm_vjp(args, y, g):
    x, gain, bias = args
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
    dbias = g.sum(axis=lead) if lead else g.copy()
    dxhat = g * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return (dx, dgain, dbias)


layernorm = define_primitive("layernorm", _layernorm_forward, _layernorm_vjp)


def forward_with_tape(f, params: list, inputs) -> tuple[float, Tape]:
    """Run f(params, inputs) with every parameter recorded as a tape leaf.

    f must compose operations from this module (or registered primitives) and
    return a scalar loss.  The returned loss value is bitwise identical to
    running f on the raw arrays, since recording reuses the same forwards.
    """
    tape = Tape()
    pnodes = [tape.leaf(p) for p in params]
    tape.params = pnodes
    out = f(pnodes, inputs)
    tape.output = out
    value = out.value if isinstance(out, Node) else out
    return float(value), tape


def backward(tape: Tape) -> list[np.ndarray]:
    """Gradients of the recorded output for every parameter leaf."""
    if not tape.params:
        return []
    if not isinstance(tape.output, Node):
        return [np.zeros_like(p.value) for p in tape.params]
    return tape.gradients(tape.output, tape.params)


@dataclass(frozen=True)
class GradReport:
    """Comparison of taped gradients against central finite differences."""

    max_rel_error: float
    per_param: tuple[float, ...]
    step: float
    precision: str = "double"


def gradcheck(f, params: list, inputs, step: float = 1e-5) -> GradReport:
    """Check every parameter coordinate of f against central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8)
    per coordinate.  Raises NonFiniteGradient if either side is non-finite.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    _, tape = forward_with_tape(f, params, inputs)
    analytic = backward(tape)

    per_param = []
    for pi, p in enumerate(params):
        a = np.asarray(analytic[pi], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NonFiniteGradient(f"analytic gradient of parameter {pi} is non-finite")
        worst = 0.0
        flat = p.reshape(-1)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + step
            up = float(f(params, inputs))
            flat[j] = orig - step
            down = float(f(params, inputs))
            flat[j] = orig
            num = (up - down) / (2.0 * step)
            if not np.isfinite(num):
                raise NonFiniteGradient(
                    f"numeric gradient of parameter {pi}[{j}] is non-finite"
                )
            ana = float(a.reshape(-1)[j])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
        per_param.append(worst)
    overall = max(per_param) if per_param else 0.0
    return GradReport(max_rel_error=overall, per_param=tuple(per_param), step=step)


def prefix_attention_scan_graph(s, values):
    """Many-to-many attention differentiated through the scan combines.

    Builds the combine tree out of elementary operations (max with its
    earliest-index subgradient, exp, multiply, add), so gradients flow along
    exactly the path the parallel scan evaluates.
    """
    n = _shape(_coerce(s))[0]
    items = [(get_item(s, i), 1.0, get_row(values, i)) for i in range(n)]

    def comb(lhs, rhs):
        lm, lu, lw = lhs
        rm, ru, rw = rhs
        m = scalar_max(lm, rm)
        e_l = exp(sub(lm, m))
        e_r = exp(sub(rm, m))
        return (m, add(mul(lu, e_l), mul(ru, e_r)), add(mul(lw, e_l), mul(rw, e_r)))

    elements = scan.inclusive_scan(items, comb)
    return stack_rows(*[div(w, u) for (_, u, w) in elements])


def prefix_attention_direct_graph(s, values):
    """Many-to-many attention differentiated through per-prefix softmax."""
    n = _shape(_coerce(s))[0]
    rows = []
    for k in range(n):
        sk = take_slice(s, 0, k + 1)
        m = max_all(sk)
        e = exp(sub(sk, m))
        u = sum_all(e)
        w = vecmat(e, take_rows(values, 0, k + 1))
        rows.append(div(w, u))
    return stack_rows(*rows)
