"""Streaming benchmark: state size and step cost as a token stream grows.

Both models consume the same seeded token stream.  Per token we record two
deterministic counters and two advisory wall-clock fields:

    state_scalars     floats held by the attention state / kv cache
    madds_step        multiply-adds spent updating attention state this step
    madds_cumulative  running total of the above
    wall_ns_*         perf_counter_ns timings (machine-dependent)

The multiply-add counters cover the attention-state path only: score
computation, softmax/normalizer work, and value aggregation.  Token-side
projections, norms, and mlp blocks are byte-for-byte identical between the
two model families, so they are excluded; what remains is exactly the part
whose cost and memory differ.  Counts depend only on the configuration, never
on data or timing, so they are reproducible bit for bit.

A note on what the numbers show: the recurrent model's state and per-step
cost are flat in t, so its cumulative cost is linear; the kv baseline's state
and per-step cost grow linearly in t, so its cumulative cost is quadratic.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import aaren, transformer
from .aaren import AarenConfig
from .numeric import InvalidConfig, OpCounter, Precision

CSV_HEADER = (
    "model,t,state_scalars,madds_step,madds_cumulative,wall_ns_step,wall_ns_cumulative"
)

AAREN = "aaren"
TRANSFORMER_KV = "transformer_kv"


@dataclass(frozen=True)
class BenchConfig:
    d_model: int
    n_heads: int
    n_layers: int
    max_tokens: int
    seed: int
    precision: str = "double"

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise InvalidConfig(f"non-positive dimension in {self}")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_tokens < 64:
            raise InvalidConfig(f"max_tokens must be >= 64, got {self.max_tokens}")
        if self.precision not in ("single", "double"):
            raise InvalidConfig(f"precision must be single or double, got {self.precision!r}")


@dataclass(frozen=True)
class BenchRecord:
    model: str
    t: int
    state_scalars: int
    madds_step: int
    madds_cumulative: int
    wall_ns_step: int
    wall_ns_cumulative: int


def model_config(config: BenchConfig) -> AarenConfig:
    """The full-block layer configuration both models run under."""
    return AarenConfig(
        d_model=config.d_model,
        n_heads=config.n_heads,
        n_layers=config.n_layers,
        use_ffn=True,
        use_layernorm=True,
        use_residual=True,
        scaled_scores=False,
    )


def _token_stream(config: BenchConfig) -> np.ndarray:
    ss = np.random.SeedSequence(config.seed)
    rng = np.random.Generator(np.random.PCG64(ss.spawn(3)[2]))
    return rng.normal(size=(config.max_tokens, config.d_model))


def _cast_params(params, dtype):
    from dataclasses import replace

    out = []
    for p in params:
        kwargs = {
            f.name: (None if getattr(p, f.name) is None else np.asarray(getattr(p, f.name), dtype=dtype))
            for f in dataclass_fields(p)
        }
        out.append(replace(p, **kwargs))
    return out


def run_streaming_bench(config: BenchConfig) -> list[BenchRecord]:
    """Feed the identical seeded stream to both models; one record per token
    per model, recurrent rows first."""
    mcfg = model_config(config)
    dtype = Precision(config.precision).dtype
    ss = np.random.SeedSequence(config.seed)
    seeds = ss.spawn(3)
    a_params = _cast_params(
        aaren.init_params(mcfg, np.random.Generator(np.random.PCG64(seeds[0]))), dtype
    )
    t_params = _cast_params(
        transformer.init_params(mcfg, np.random.Generator(np.random.PCG64(seeds[1]))),
        dtype,
    )
    tokens = _token_stream(config).astype(dtype)

    records: list[BenchRecord] = []

    state = aaren.init_state(a_params, mcfg, dtype=dtype)
    counter = OpCounter()
    wall_total = 0
    prev_madds = 0
    for t in range(1, config.max_tokens + 1):
        start = time.perf_counter_ns()
        _, state = aaren.model_step(a_params, state, tokens[t - 1], mcfg, counter=counter)
        elapsed = time.perf_counter_ns() - start
        wall_total += elapsed
        records.append(
            BenchRecord(
                model=AAREN,
                t=t,
                state_scalars=state.scalar_count,
                madds_step=counter.madds - prev_madds,
                madds_cumulative=counter.madds,
                wall_ns_step=elapsed,
                wall_ns_cumulative=wall_total,
            )
        )
        prev_madds = counter.madds

    cache = transformer.init_cache(mcfg)
    counter = OpCounter()
    wall_total = 0
    prev_madds = 0
    for t in range(1, config.max_tokens + 1):
        start = time.perf_counter_ns()
        _, cache = transformer.kv_cache_step(t_params, cache, tokens[t - 1], mcfg, counter=counter)
        elapsed = time.perf_counter_ns() - start
        wall_total += elapsed
        records.append(
            BenchRecord(
                model=TRANSFORMER_KV,
                t=t,
                state_scalars=cache.scalar_count,
                madds_step=counter.madds - prev_madds,
                madds_cumulative=counter.madds,
                wall_ns_step=elapsed,
                wall_ns_cumulative=wall_total,
            )
        )
        prev_madds = counter.madds

    return records


def write_csv(records: list[BenchRecord], path) -> None:
    """UTF-8, LF line endings, header always present (even with no records)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER.split(","))
        for r in records:
            writer.writerow(
                [
                    r.model,
                    r.t,
                    r.state_scalars,
                    r.madds_step,
                    r.madds_cumulative,
                    r.wall_ns_step,
                    r.wall_ns_cumulative,
                ]
            )


def read_csv(path) -> list[BenchRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER.split(","):
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            BenchRecord(
                model=row[0],
                t=int(row[1]),
                state_scalars=int(row[2]),
                madds_step=int(row[3]),
                madds_cumulative=int(row[4]),
                wall_ns_step=int(row[5]),
                wall_ns_cumulative=int(row[6]),
            )
            for row in reader
        ]


def cumulative_madds_at(records: list[BenchRecord], model: str, t: int) -> int:
    for r in records:
        if r.model == model and r.t == t:
            return r.madds_cumulative
    raise ValueError(f"no record for model={model} t={t}")
