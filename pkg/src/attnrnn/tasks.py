"""Toy sequence tasks and a deterministic full-batch SGD loop.

Three generators, each seeded and split into disjoint train/eval sets:

    prefix_sum_regression   target row k is the mean of input rows 0..k
    selective_copy          recall the row flagged by the marker channel
                            (last input channel; read out at the last position)
    majority_classify       sign of the summed inputs (read out at channel 0
                            of the last position)

Training is plain SGD (optional momentum) on the mean loss over the whole
training set, so a (seed, config) pair reproduces the loss sequence bit for
bit.  Losses are means over positions and channels, which keeps per-token
loss directly available for the sequence-labelled task.

Models are built minimal for these tasks: attention block only, no norm, no
mlp, no residual, d_model equal to the input width.  The kv baseline has no
positional signal of its own, so for selective_copy it gets sinusoidal
encodings added to its inputs (the recurrent model never needs them).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import aaren, autodiff as ad, transformer
from .aaren import AarenConfig
from .numeric import DivergedLoss, InvalidConfig, make_rng

TASK_KINDS = ("prefix_sum_regression", "selective_copy", "majority_classify")
MODEL_KINDS = ("aaren", "transformer")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int
    d_input: int
    n_train: int
    n_eval: int
    seed: int

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise InvalidConfig(f"unknown task kind {self.kind!r}")
        if self.seq_len < 1 or self.d_input < 1 or self.n_train < 1 or self.n_eval < 1:
            raise InvalidConfig(f"non-positive size in {self}")
        if self.kind == "selective_copy" and self.d_input < 2:
            raise InvalidConfig("selective_copy needs >= 2 channels (values + marker)")


@dataclass(frozen=True)
class TaskData:
    train: list
    eval: list


def _gen_example(kind: str, seq_len: int, d_input: int, rng: np.random.Generator):
    if kind == "prefix_sum_regression":
        x = rng.normal(size=(seq_len, d_input))
        counts = np.arange(1, seq_len + 1)[:, None].astype(np.float64)
        target = np.cumsum(x, axis=0) / counts
        return x, target
    if kind == "selective_copy":
        x = rng.normal(size=(seq_len, d_input))
        x[:, -1] = 0.0
        pos = int(rng.integers(0, seq_len))
        x[pos, -1] = 1.0
        return x, x[pos].copy()
    # majority_classify
    x = rng.normal(size=(seq_len, d_input))
    return x, float(np.sign(x.sum()))


def gen_task(spec: TaskSpec) -> TaskData:
    """Seeded dataset; train and eval examples come from one stream, so the
    splits are disjoint by construction."""
    rng = make_rng(spec.seed)
    train = [
        _gen_example(spec.kind, spec.seq_len, spec.d_input, rng)
        for _ in range(spec.n_train)
    ]
    eval_ = [
        _gen_example(spec.kind, spec.seq_len, spec.d_input, rng)
        for _ in range(spec.n_eval)
    ]
    return TaskData(train=train, eval=eval_)


def task_model_config(spec: TaskSpec, n_layers: int = 1, n_heads: int = 1) -> AarenConfig:
    return AarenConfig(
        d_model=spec.d_input,
        n_heads=n_heads,
        n_layers=n_layers,
        use_ffn=False,
        use_layernorm=False,
        use_residual=False,
        scaled_scores=False,
    )


def _example_loss(outputs, example, kind: str):
    x, target = example
    if kind == "prefix_sum_regression":
        diff = ad.sub(outputs, target)
        return ad.mul(ad.sum_all(ad.mul(diff, diff)), 1.0 / target.size)
    last = ad.get_row(outputs, x.shape[0] - 1)
    if kind == "selective_copy":
        diff = ad.sub(last, target)
        return ad.mul(ad.sum_all(ad.mul(diff, diff)), 1.0 / target.shape[0])
    pred = ad.get_item(last, 0)
    diff = ad.sub(pred, target)
    return ad.mul(diff, diff)


def _batch_loss(flat_params, batch, config, model_kind, task_kind, encodings):
    if model_kind == "aaren":
        params = aaren.unflatten_params(list(flat_params), config)
        forward = aaren.model_forward
    else:
        params = transformer.unflatten_params(list(flat_params), config)
        forward = transformer.model_forward
    total = None
    for example in batch:
        x = example[0] if encodings is None else example[0] + encodings
        outputs = forward(params, x, config)
        loss = _example_loss(outputs, example, task_kind)
        total = loss if total is None else ad.add(total, loss)
    return ad.mul(total, 1.0 / len(batch))


@dataclass
class TrainLog:
    entries: list
    final_eval: float
    config_hash: str
    seed: int


def _config_hash(model_kind, spec, steps, lr, momentum, n_layers, n_heads) -> str:
    blob = json.dumps(
        {
            "model": model_kind,
            "spec": asdict(spec),
            "steps": steps,
            "lr": lr,
            "momentum": momentum,
            "n_layers": n_layers,
            "n_heads": n_heads,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train(
    model_kind: str,
    spec: TaskSpec,
    steps: int,
    lr: float,
    momentum: float = 0.0,
    n_layers: int = 1,
    n_heads: int = 1,
    log_every: int = 10,
) -> TrainLog:
    """Full-batch SGD; returns the loss trace and the final eval loss.

    Raises DivergedLoss (carrying the partial trace on .entries) if the loss
    leaves the finite range.
    """
    if model_kind not in MODEL_KINDS:
        raise InvalidConfig(f"unknown model kind {model_kind!r}")
    data = gen_task(spec)
    config = task_model_config(spec, n_layers=n_layers, n_heads=n_heads)
    rng = make_rng(spec.seed + 1)
    if model_kind == "aaren":
        params = aaren.init_params(config, rng)
        flat = aaren.flatten_params(params, config)
    else:
        params = transformer.init_params(config, rng)
        flat = transformer.flatten_params(params, config)
    flat = [np.array(p, dtype=np.float64) for p in flat]

    encodings = None
    if model_kind == "transformer" and spec.kind == "selective_copy":
        encodings = transformer.sinusoidal_encoding(spec.seq_len, spec.d_input)

    def loss_fn(p, batch):
        return _batch_loss(p, batch, config, model_kind, spec.kind, encodings)

    entries: list[dict] = []
    velocity = [np.zeros_like(p) for p in flat]
    hash_ = _config_hash(model_kind, spec, steps, lr, momentum, n_layers, n_heads)

    # Overflow to inf/nan is the signal DivergedLoss reports; silence the
    # intermediate numpy warnings so the exception is the only diagnostic.
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            loss, tape = ad.forward_with_tape(loss_fn, flat, data.train)
            if not math.isfinite(loss):
                exc = DivergedLoss(f"loss {loss} at step {step}")
                exc.entries = entries
                raise exc
            if step % log_every == 0:
                entries.append({"step": step, "loss": loss})
            grads = ad.backward(tape)
            for i, g in enumerate(grads):
                if momentum > 0.0:
                    velocity[i] = momentum * velocity[i] + g
                    flat[i] = flat[i] - lr * velocity[i]
                else:
                    flat[i] = flat[i] - lr * g
        final_train = float(loss_fn(flat, data.train))
    if not math.isfinite(final_train):
        exc = DivergedLoss(f"loss {final_train} after step {steps}")
        exc.entries = entries
        raise exc
    entries.append({"step": steps, "loss": final_train})
    final_eval = float(loss_fn(flat, data.eval))
    return TrainLog(entries=entries, final_eval=final_eval, config_hash=hash_, seed=spec.seed)


def write_train_log(log: TrainLog, path) -> None:
    """JSON lines: one object per logged step, then one summary object."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log.entries:
            fh.write(json.dumps(entry) + "\n")
        fh.write(
            json.dumps(
                {
                    "final_eval": log.final_eval,
                    "config_hash": log.config_hash,
                    "seed": log.seed,
                }
            )
            + "\n"
        )
