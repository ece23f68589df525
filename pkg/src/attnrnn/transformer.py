"""Causal self-attention baseline with a growing key/value cache.

Identical block structure and toggles to the streaming attention stack; the
single structural difference is the query: each position projects its own
query through a d_model x d_model matrix instead of reading a learned
per-layer vector.  That one change forces incremental decoding to keep every
past key and value around, so the cache grows linearly in tokens and the
per-step multiply-add count grows linearly too.

Positional information: the attention itself is permutation-equivariant, so
toy tasks may optionally add sinusoidal encodings to the inputs (see
sinusoidal_encoding); nothing here adds them implicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numeric
from .aaren import AarenConfig, _init_common, layer_array_fields as _aaren_fields
from .aaren import param_count as _aaren_param_count
from .numeric import OpCounter


@dataclass(frozen=True)
class TransformerLayerParams:
    """One baseline layer: q/k/v/o projections plus the shared optional blocks."""

    w_q: np.ndarray
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
    """Canonical order: w_q replaces the learned query vector up front."""
    return ["w_q"] + _aaren_fields(config)[1:]


def init_layer_params(
    config: AarenConfig, rng: np.random.Generator
) -> TransformerLayerParams:
    d = config.d_model
    w_q = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    return TransformerLayerParams(w_q=w_q, **_init_common(config, rng))


def init_params(
    config: AarenConfig, rng: np.random.Generator
) -> list[TransformerLayerParams]:
    return [init_layer_params(config, rng) for _ in range(config.n_layers)]


def flatten_params(
    params: list[TransformerLayerParams], config: AarenConfig
) -> list[np.ndarray]:
    fields = layer_array_fields(config)
    return [getattr(p, f) for p in params for f in fields]


def unflatten_params(arrays: list, config: AarenConfig) -> list[TransformerLayerParams]:
    fields = layer_array_fields(config)
    per_layer = len(fields)
    if len(arrays) != per_layer * config.n_layers:
        raise numeric.InvalidConfig(
            f"expected {per_layer * config.n_layers} arrays, got {len(arrays)}"
        )
    return [
        TransformerLayerParams(
            **dict(zip(fields, arrays[i * per_layer : (i + 1) * per_layer]))
        )
        for i in range(config.n_layers)
    ]


def param_count(config: AarenConfig) -> int:
    """Exact learned-scalar count; differs from the streaming stack only by
    carrying a query matrix (d*d) instead of a query vector (d) per layer."""
    d = config.d_model
    return _aaren_param_count(config) + config.n_layers * (d * d - d)


def causal_attention_outputs(scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Row k: stable softmax over scores[k, :k+1], then weight values.

    Each row goes through the same stable softmax kernel as the one-shot
    reference, so arbitrarily large score magnitudes stay finite.
    """
    n = scores.shape[0]
    rows = [
        numeric.softmax_stable(scores[i, : i + 1]) @ values[: i + 1] for i in range(n)
    ]
    return np.stack(rows)


def _causal_attention_vjp(args, out, g):
    """Per-row softmax-aggregation gradient, from the unshifted form."""
    scores, values = args
    n = scores.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    masked = np.where(mask, scores, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    dv = p.T @ g
    dp = g @ values.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    return (ds, dv)


causal_attention = ad.define_primitive(
    "causal_attention", causal_attention_outputs, _causal_attention_vjp
)


def causal_self_attention(params: TransformerLayerParams, inputs, config: AarenConfig):
    """One baseline layer over all positions.  Accepts arrays or tape nodes."""
    h = inputs
    x = ad.layernorm(h, params.ln1_gain, params.ln1_bias) if config.use_layernorm else h
    qm = ad.linear(x, params.w_q)
    k = ad.linear(x, params.w_k)
    v = ad.linear(x, params.w_v)
    dh = config.head_dim
    heads = []
    for i in range(config.n_heads):
        lo, hi = i * dh, (i + 1) * dh
        s = ad.linear(ad.take_cols(qm, lo, hi), ad.take_cols(k, lo, hi))
        if config.scaled_scores:
            s = ad.mul(s, 1.0 / math.sqrt(dh))
        heads.append(causal_attention(s, ad.take_cols(v, lo, hi)))
    y = ad.linear(ad.concat_cols(*heads), params.w_o)
    h1 = ad.add(h, y) if config.use_residual else y
    if config.use_ffn:
        z = ad.layernorm(h1, params.ln2_gain, params.ln2_bias) if config.use_layernorm else h1
        hid = ad.tanh(ad.add(ad.linear(z, params.mlp_w1), params.mlp_b1))
        f = ad.add(ad.linear(hid, params.mlp_w2), params.mlp_b2)
        h1 = ad.add(h1, f) if config.use_residual else f
    return h1


def model_forward(params: list[TransformerLayerParams], inputs, config: AarenConfig):
    h = inputs
    for p in params:
        h = causal_self_attention(p, h, config)
    return h


@dataclass
class KvCache:
    """Per layer, per head: every past key and value row, in arrival order."""

    keys: list[list[list[np.ndarray]]]
    values: list[list[list[np.ndarray]]]

    @property
    def tokens_seen(self) -> int:
        return len(self.keys[0][0]) if self.keys and self.keys[0] else 0

    @property
    def scalar_count(self) -> int:
        """Cached scalars; exactly tokens * layers * heads * 2 * head_dim."""
        return sum(
            k.shape[0]
            for layer_k in self.keys
            for head_k in layer_k
            for k in head_k
        ) + sum(
            v.shape[0]
            for layer_v in self.values
            for head_v in layer_v
            for v in head_v
        )


def init_cache(config: AarenConfig) -> KvCache:
    return KvCache(
        keys=[[[] for _ in range(config.n_heads)] for _ in range(config.n_layers)],
        values=[[[] for _ in range(config.n_heads)] for _ in range(config.n_layers)],
    )


def _layer_kv_step(
    params: TransformerLayerParams,
    layer_keys: list[list[np.ndarray]],
    layer_values: list[list[np.ndarray]],
    x: np.ndarray,
    config: AarenConfig,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Append the new token to this layer's cache and attend over it."""
    xn = ad.layernorm(x, params.ln1_gain, params.ln1_bias) if config.use_layernorm else x
    qv = params.w_q @ xn
    k = params.w_k @ xn
    v = params.w_v @ xn
    dh = config.head_dim
    outs = []
    for i in range(config.n_heads):
        lo, hi = i * dh, (i + 1) * dh
        layer_keys[i].append(k[lo:hi])
        layer_values[i].append(v[lo:hi])
        ks = np.stack(layer_keys[i])
        s = ks @ qv[lo:hi]
        if config.scaled_scores:
            s = s * (1.0 / math.sqrt(dh))
        w = numeric.softmax_stable(s)
        outs.append(w @ np.stack(layer_values[i]))
        if counter is not None:
            t = ks.shape[0]
            # scores t*dh, softmax approx 2 ops per entry, weighting 2*t*dh.
            counter.add(t * dh + 2 * t + 2 * t * dh)
    y = params.w_o @ np.concatenate(outs)
    h1 = x + y if config.use_residual else y
    if config.use_ffn:
        z = ad.layernorm(h1, params.ln2_gain, params.ln2_bias) if config.use_layernorm else h1
        f = params.mlp_w2 @ np.tanh(params.mlp_w1 @ z + params.mlp_b1) + params.mlp_b2
        h1 = h1 + f if config.use_residual else f
    return h1


def kv_cache_step(
    params: list[TransformerLayerParams],
    cache: KvCache,
    x: np.ndarray,
    config: AarenConfig,
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, KvCache]:
    """Advance the whole stack by one token, growing the cache in place.

    The cache has a single owner: the stream that created it.  Output equals
    the final row of model_forward on the tokens seen so far.
    """
    h = np.asarray(x)
    for layer_idx, p in enumerate(params):
        h = _layer_kv_step(
            p, cache.keys[layer_idx], cache.values[layer_idx], h, config, counter
        )
    return h, cache


def sinusoidal_encoding(n: int, d: int) -> np.ndarray:
    """Classic fixed position code: sin/cos pairs at geometric wavelengths."""
    pos = np.arange(n)[:, None].astype(np.float64)
    idx = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc
