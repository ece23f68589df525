"""Stackable attention layers driven by a learned, input-independent query.

Each layer projects its inputs to keys and values, splits them across heads,
and aggregates every prefix with the scan kernel: output k summarizes tokens
0..k.  Because the query is a per-layer parameter rather than a projection of
the current token, the layer is a recurrence over a constant-size state and
can stream token by token:

    batch:      layer_forward(params, inputs)         one scan per head
    streaming:  layer_step(params, states, x)         one cell update per head

Both views compute the same function; streaming holds exactly
n_heads * (head_dim + 2) scalars per layer regardless of how many tokens have
passed.  Layers stack by feeding each layer's output at position k to the next
layer at position k, in batch and streaming form alike.

The block layout is pre-norm: y = x + attn(ln(x)), optionally followed by
y + mlp(ln(y)), with every piece (norm, mlp, residual) toggleable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels, numeric, scan
from .numeric import InvalidConfig, OpCounter, Precision


@dataclass(frozen=True)
class AarenConfig:
    d_model: int
    n_heads: int
    n_layers: int
    ffn_mult: int = 2
    use_ffn: bool = True
    use_layernorm: bool = True
    use_residual: bool = True
    scaled_scores: bool = False

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0:
            raise InvalidConfig(f"non-positive dimension in {self}")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.ffn_mult < 1:
            raise InvalidConfig(f"ffn_mult must be >= 1, got {self.ffn_mult}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class AarenLayerParams:
    """One layer: learned query vector plus key/value/output projections.

    There is no query projection matrix; the d_model query vector is the
    layer's own parameter, sliced per head.  Optional fields are None when
    the corresponding block toggle is off.
    """

    q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln1_gain: np.ndarray | None = None
    ln1_bias: np.ndarray | None = None
    mlp_w1: np.ndarray | None = None
    mlp_b1: np.ndarray | None = None
    mlp_w2: np.ndarray | None = None
    mlp_b2: np.ndarray | None = None
    ln2_gain: np.ndarray | None = None
    ln2_bias: np.ndarray | None = None


def layer_array_fields(config: AarenConfig) -> list[str]:
    """Canonical parameter order used by flattening and serialization."""
    fields = ["q", "w_k", "w_v", "w_o"]
    if config.use_layernorm:
        fields += ["ln1_gain", "ln1_bias"]
    if config.use_ffn:
        fields += ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"]
        if config.use_layernorm:
            fields += ["ln2_gain", "ln2_bias"]
    return fields


def _init_common(config: AarenConfig, rng: np.random.Generator) -> dict:
    """Shared draws for the projection/mlp/norm fields (query family aside).

    Weight matrices are zero-mean normal with std 1/sqrt(fan_in); norm gains
    start at one, every bias at zero.  Draw order is fixed so a seed pins the
    parameters bit for bit.
    """
    d = config.d_model
    out: dict = {}
    for name in ("w_k", "w_v", "w_o"):
        out[name] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    if config.use_layernorm:
        out["ln1_gain"] = np.ones(d)
        out["ln1_bias"] = np.zeros(d)
    if config.use_ffn:
        f = config.ffn_mult * d
        out["mlp_w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(f, d))
        out["mlp_b1"] = np.zeros(f)
        out["mlp_w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), size=(d, f))
        out["mlp_b2"] = np.zeros(d)
        if config.use_layernorm:
            out["ln2_gain"] = np.ones(d)
            out["ln2_bias"] = np.zeros(d)
    return out


def init_layer_params(config: AarenConfig, rng: np.random.Generator) -> AarenLayerParams:
    q = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=config.d_model)
    return AarenLayerParams(q=q, **_init_common(config, rng))


def init_params(config: AarenConfig, rng: np.random.Generator) -> list[AarenLayerParams]:
    return [init_layer_params(config, rng) for _ in range(config.n_layers)]


def flatten_params(params: list[AarenLayerParams], config: AarenConfig) -> list[np.ndarray]:
    """Layer parameters as a flat list of arrays in canonical order."""
    fields = layer_array_fields(config)
    return [getattr(p, f) for p in params for f in fields]


def unflatten_params(arrays: list, config: AarenConfig) -> list[AarenLayerParams]:
    """Inverse of flatten_params; accepts arrays or tape nodes."""
    fields = layer_array_fields(config)
    per_layer = len(fields)
    if len(arrays) != per_layer * config.n_layers:
        raise InvalidConfig(
            f"expected {per_layer * config.n_layers} arrays, got {len(arrays)}"
        )
    out = []
    for i in range(config.n_layers):
        chunk = arrays[i * per_layer : (i + 1) * per_layer]
        out.append(AarenLayerParams(**dict(zip(fields, chunk))))
    return out


def param_count(config: AarenConfig) -> int:
    """Exact learned-scalar count for a stack of layers."""
    d = config.d_model
    per_layer = d + 3 * d * d  # query vector + k/v/o projections
    if config.use_layernorm:
        per_layer += 2 * d
    if config.use_ffn:
        f = config.ffn_mult * d
        per_layer += f * d + f + d * f + d
        if config.use_layernorm:
            per_layer += 2 * d
    return config.n_layers * per_layer


def param_delta_vs_transformer(config: AarenConfig) -> int:
    """Parameter difference against the matched causal baseline.

    The only structural difference is the query: a d_model vector here versus
    a d_model x d_model projection there, so the delta per layer is
    d_model - d_model**2 (negative: this family is smaller).
    """
    return config.n_layers * (config.d_model - config.d_model * config.d_model)


# Published totals for one ~3.1M-parameter configuration pair, kept only as
# bookkeeping constants: the full architecture behind them (embeddings, head,
# widths) is unspecified, so they cannot be rebuilt from an AarenConfig, and
# their +512 difference does not follow the vector-for-matrix query convention
# this module uses.
REFERENCE_PARAM_COUNTS = {"transformer": 3_152_384, "aaren": 3_152_896}


def _prefix_attention_vjp(args, out, g):
    """Gradient of per-prefix softmax aggregation, from the unshifted form.

    With p[k,i] = softmax_i(s[0..k]) and o_k = sum_i p[k,i] v_i:
        d s_i = sum_{k>=i} p[k,i] (g_k . v_i - g_k . o_k)
        d v_i = sum_{k>=i} p[k,i] g_k
    The running max used by the forward kernel cancels in o_k and therefore
    carries no gradient.
    """
    s, v = args
    n = s.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    m_run = np.maximum.accumulate(s)
    shifted = np.where(mask, s[None, :] - m_run[:, None], -np.inf)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    dv = p.T @ g
    a = g @ v.T
    local = (g * out).sum(axis=1)
    ds = (p * (a - local[:, None])).sum(axis=0)
    return (ds, dv)


prefix_attention = ad.define_primitive(
    "prefix_attention",
    lambda s, v: scan.prefix_attention_outputs(s, v),
    _prefix_attention_vjp,
)


def layer_forward(params: AarenLayerParams, inputs, config: AarenConfig):
    """All positions of one layer at once.  Accepts arrays or tape nodes."""
    h = inputs
    x = ad.layernorm(h, params.ln1_gain, params.ln1_bias) if config.use_layernorm else h
    k = ad.linear(x, params.w_k)
    v = ad.linear(x, params.w_v)
    dh = config.head_dim
    heads = []
    for i in range(config.n_heads):
        lo, hi = i * dh, (i + 1) * dh
        s = ad.matvec(ad.take_cols(k, lo, hi), ad.take_slice(params.q, lo, hi))
        if config.scaled_scores:
            s = ad.mul(s, 1.0 / math.sqrt(dh))
        heads.append(prefix_attention(s, ad.take_cols(v, lo, hi)))
    y = ad.linear(ad.concat_cols(*heads), params.w_o)
    h1 = ad.add(h, y) if config.use_residual else y
    if config.use_ffn:
        z = (
            ad.layernorm(h1, params.ln2_gain, params.ln2_bias)
            if config.use_layernorm
            else h1
        )
        hid = ad.tanh(ad.add(ad.linear(z, params.mlp_w1), params.mlp_b1))
        f = ad.add(ad.linear(hid, params.mlp_w2), params.mlp_b2)
        h1 = ad.add(h1, f) if config.use_residual else f
    return h1


def model_forward(params: list[AarenLayerParams], inputs, config: AarenConfig):
    """Stack of layers; an empty stack is the identity."""
    h = inputs
    for p in params:
        h = layer_forward(p, h, config)
    return h


@dataclass
class AarenState:
    """Streaming state: one AttentionState per layer per head."""

    layers: list[list[kernels.AttentionState]]

    @property
    def scalar_count(self) -> int:
        """Scalars held across the whole stack; independent of tokens seen."""
        return sum(st.scalar_count for layer in self.layers for st in layer)


def init_state(
    params: list[AarenLayerParams], config: AarenConfig, dtype=np.float64
) -> AarenState:
    dh = config.head_dim
    layers = []
    for p in params:
        q = np.asarray(p.q, dtype=dtype)
        layers.append(
            [
                kernels.initial_state(q[i * dh : (i + 1) * dh], dh, dtype=dtype)
                for i in range(config.n_heads)
            ]
        )
    return AarenState(layers=layers)


def layer_step(
    params: AarenLayerParams,
    states: list[kernels.AttentionState],
    x: np.ndarray,
    config: AarenConfig,
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, list[kernels.AttentionState]]:
    """Advance one layer by one token; same function as layer_forward row k."""
    xn = ad.layernorm(x, params.ln1_gain, params.ln1_bias) if config.use_layernorm else x
    k = params.w_k @ xn
    v = params.w_v @ xn
    dh = config.head_dim
    new_states = []
    outs = []
    for i, st in enumerate(states):
        lo, hi = i * dh, (i + 1) * dh
        st = kernels.rnn_cell_step(
            st, k[lo:hi], v[lo:hi], scaled=config.scaled_scores, counter=counter
        )
        new_states.append(st)
        outs.append(kernels.state_output(st))
        if counter is not None:
            counter.add(dh)  # the a / c normalization
    y = params.w_o @ np.concatenate(outs)
    h1 = x + y if config.use_residual else y
    if config.use_ffn:
        z = ad.layernorm(h1, params.ln2_gain, params.ln2_bias) if config.use_layernorm else h1
        f = params.mlp_w2 @ np.tanh(params.mlp_w1 @ z + params.mlp_b1) + params.mlp_b2
        h1 = h1 + f if config.use_residual else f
    return h1, new_states


def model_step(
    params: list[AarenLayerParams],
    state: AarenState,
    x: np.ndarray,
    config: AarenConfig,
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, AarenState]:
    """Advance the whole stack by one token.

    The state after k steps depends only on tokens 1..k; memory held is
    constant in k and the multiply-add count per step is constant too.
    """
    h = np.asarray(x)
    new_layers = []
    for p, states in zip(params, state.layers):
        h, new = layer_step(p, states, h, config, counter=counter)
        new_layers.append(new)
    return h, AarenState(layers=new_layers)
