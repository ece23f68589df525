"""Versioned binary layout for parameters and streaming state.

Both model families share one container so a stream can be checkpointed and
resumed bit-exactly.  All integers are little-endian; the scalar payload is
raw IEEE float64 (lossless for float32 state, whose width is recorded and
restored on load).

    offset  size  field
    0       4     magic  b"ARNS"
    4       2     format version (currently 1)
    6       1     kind: 1=aaren params, 2=transformer params,
                        3=aaren state,  4=kv cache
    7       1     array dtype: 1=float64, 2=float32
    8       4     d_model
    12      4     n_heads
    16      4     n_layers
    20      4     ffn_mult
    24      1     toggles: bit0 use_ffn, bit1 use_layernorm,
                           bit2 use_residual, bit3 scaled_scores
    25      8     aux (tokens cached, for kind 4; else 0)
    33      8     scalar count
    41      ...   payload, count * 8 bytes

Payload orders: parameters follow the canonical flatten order of their
module; aaren state is (a, c, m) per layer per head; the kv cache is all key
rows then all value rows per layer per head, in arrival order.
"""

from __future__ import annotations

import struct

import numpy as np

from . import aaren, kernels, transformer
from .aaren import AarenConfig, AarenState
from .transformer import KvCache

MAGIC = b"ARNS"
VERSION = 1

KIND_AAREN_PARAMS = 1
KIND_TRANSFORMER_PARAMS = 2
KIND_AAREN_STATE = 3
KIND_KV_CACHE = 4

_HEADER = struct.Struct("<4sHBBIIIIBQQ")

_DTYPE_CODES = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_CODE_DTYPES = {1: np.dtype(np.float64), 2: np.dtype(np.float32)}


class FormatError(ValueError):
    """The file is not a valid container of the expected kind."""


def _flags(config: AarenConfig) -> int:
    return (
        (1 if config.use_ffn else 0)
        | (2 if config.use_layernorm else 0)
        | (4 if config.use_residual else 0)
        | (8 if config.scaled_scores else 0)
    )


def _config_from(d_model, n_heads, n_layers, ffn_mult, flags) -> AarenConfig:
    return AarenConfig(
        d_model=d_model,
        n_heads=n_heads,
        n_layers=n_layers,
        ffn_mult=ffn_mult,
        use_ffn=bool(flags & 1),
        use_layernorm=bool(flags & 2),
        use_residual=bool(flags & 4),
        scaled_scores=bool(flags & 8),
    )


def _write(path, kind: int, config: AarenConfig, payload: np.ndarray, dtype, aux: int = 0) -> None:
    payload = np.ascontiguousarray(payload, dtype=np.float64)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        kind,
        _DTYPE_CODES[np.dtype(dtype)],
        config.d_model,
        config.n_heads,
        config.n_layers,
        config.ffn_mult,
        _flags(config),
        aux,
        payload.shape[0],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.astype("<f8").tobytes())


def _read(path, kind: int):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, got_kind, dtype_code, d_model, n_heads, n_layers, ffn_mult, flags, aux, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if got_kind != kind:
        raise FormatError(f"{path}: kind {got_kind}, expected {kind}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if payload.shape[0] != count:
        raise FormatError(f"{path}: payload has {payload.shape[0]} scalars, header says {count}")
    config = _config_from(d_model, n_heads, n_layers, ffn_mult, flags)
    return config, payload.astype(np.float64), _CODE_DTYPES[dtype_code], aux


def _pack_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _unpack_arrays(payload: np.ndarray, shapes: list[tuple[int, ...]], dtype) -> list[np.ndarray]:
    out = []
    lo = 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(payload[lo : lo + n].reshape(shape).astype(dtype))
        lo += n
    if lo != payload.shape[0]:
        raise FormatError(f"payload has {payload.shape[0]} scalars, layout wants {lo}")
    return out


def _param_shapes(config: AarenConfig, fields: list[str]) -> list[tuple[int, ...]]:
    d = config.d_model
    f = config.ffn_mult * d
    by_field = {
        "q": (d,),
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_o": (d, d),
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "mlp_w1": (f, d),
        "mlp_b1": (f,),
        "mlp_w2": (d, f),
        "mlp_b2": (d,),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
    }
    return [by_field[name] for _ in range(config.n_layers) for name in fields]


def save_aaren_params(path, config: AarenConfig, params) -> None:
    payload = _pack_arrays(aaren.flatten_params(params, config))
    dtype = params[0].q.dtype if params else np.float64
    _write(path, KIND_AAREN_PARAMS, config, payload, dtype)


def load_aaren_params(path):
    config, payload, dtype, _ = _read(path, KIND_AAREN_PARAMS)
    shapes = _param_shapes(config, aaren.layer_array_fields(config))
    arrays = _unpack_arrays(payload, shapes, dtype)
    return config, aaren.unflatten_params(arrays, config)


def save_transformer_params(path, config: AarenConfig, params) -> None:
    payload = _pack_arrays(transformer.flatten_params(params, config))
    dtype = params[0].w_q.dtype if params else np.float64
    _write(path, KIND_TRANSFORMER_PARAMS, config, payload, dtype)


def load_transformer_params(path):
    config, payload, dtype, _ = _read(path, KIND_TRANSFORMER_PARAMS)
    shapes = _param_shapes(config, transformer.layer_array_fields(config))
    arrays = _unpack_arrays(payload, shapes, dtype)
    return config, transformer.unflatten_params(arrays, config)


def save_aaren_state(path, config: AarenConfig, state: AarenState) -> None:
    chunks = []
    for layer in state.layers:
        for st in layer:
            chunks.append(np.asarray(st.a, dtype=np.float64))
            chunks.append(np.array([st.c, st.m], dtype=np.float64))
    dtype = state.layers[0][0].a.dtype if state.layers else np.float64
    _write(path, KIND_AAREN_STATE, config, _pack_arrays(chunks), dtype)


def load_aaren_state(path, params) -> tuple[AarenConfig, AarenState]:
    """Rebuild streaming state; queries are reattached from `params`."""
    config, payload, dtype, _ = _read(path, KIND_AAREN_STATE)
    dh = config.head_dim
    per_head = dh + 2
    expected = config.n_layers * config.n_heads * per_head
    if payload.shape[0] != expected:
        raise FormatError(f"state payload {payload.shape[0]} != expected {expected}")
    layers = []
    pos = 0
    for li in range(config.n_layers):
        q = np.asarray(params[li].q, dtype=dtype)
        heads = []
        for hi in range(config.n_heads):
            a = payload[pos : pos + dh].astype(dtype)
            c, m = payload[pos + dh : pos + per_head]
            pos += per_head
            heads.append(
                kernels.AttentionState(
                    a=a, c=dtype.type(c), m=dtype.type(m), q=q[hi * dh : (hi + 1) * dh]
                )
            )
        layers.append(heads)
    return config, AarenState(layers=layers)


def save_kv_cache(path, config: AarenConfig, cache: KvCache) -> None:
    t = cache.tokens_seen
    chunks = []
    for li in range(config.n_layers):
        for hi in range(config.n_heads):
            chunks.extend(cache.keys[li][hi])
            chunks.extend(cache.values[li][hi])
    dtype = (
        cache.keys[0][0][0].dtype
        if cache.keys and cache.keys[0] and cache.keys[0][0]
        else np.float64
    )
    _write(path, KIND_KV_CACHE, config, _pack_arrays(chunks), dtype, aux=t)


def load_kv_cache(path) -> tuple[AarenConfig, KvCache]:
    config, payload, dtype, t = _read(path, KIND_KV_CACHE)
    dh = config.head_dim
    expected = config.n_layers * config.n_heads * 2 * t * dh
    if payload.shape[0] != expected:
        raise FormatError(f"cache payload {payload.shape[0]} != expected {expected}")
    cache = transformer.init_cache(config)
    pos = 0
    for li in range(config.n_layers):
        for hi in range(config.n_heads):
            for row_list in (cache.keys[li][hi], cache.values[li][hi]):
                for _ in range(t):
                    row_list.append(payload[pos : pos + dh].astype(dtype))
                    pos += dh
    return config, cache
