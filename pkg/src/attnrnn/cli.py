"""Command-line front door.

Subcommands:
    verify     run seeded property suites; exit 0 only if every check passes
    bench      stream both models, write the counter CSV
    scan-demo  print the doubling-scan rounds for a small input
    train-toy  fit a toy task and write a JSON-lines loss log

Exit codes: 0 success, 1 failed checks or diverged training, 2 usage or I/O
errors.  All output is deterministic for fixed flags and seeds, except the
wall-clock columns in the bench CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import bench, scan, tasks, verify
from .numeric import DivergedLoss, InvalidConfig, make_rng


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnrnn",
        description="Streaming attention kernels, scan demos, benchmarks, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run seeded property suites")
    p.add_argument("--kernels", action="store_true", help="attention kernel checks")
    p.add_argument("--scan", action="store_true", help="prefix scan checks")
    p.add_argument("--aaren", action="store_true", help="model, bench, serialization checks")
    p.add_argument("--grad", action="store_true", help="gradient checks (prints reports as JSON lines)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="stream both models and write the counter CSV")
    p.add_argument("--config", help="JSON file with BenchConfig keys (d_model, n_heads, n_layers, max_tokens, seed, precision)")
    p.add_argument("--out", default="bench.csv", help="output CSV path")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--max-tokens", type=int, dest="max_tokens")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--precision", choices=["single", "double"])

    p = sub.add_parser("scan-demo", help="print the scan rounds for a small input")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--op", choices=["sum", "max", "attention"], default="sum")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-toy", help="train on a toy task and write a JSONL log")
    p.add_argument("--task", required=True, choices=list(tasks.TASK_KINDS))
    p.add_argument("--model", required=True, choices=list(tasks.MODEL_KINDS))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", required=True, help="JSONL output path")
    p.add_argument("--seq-len", type=int, default=32, dest="seq_len")
    p.add_argument("--d-input", type=int, default=8, dest="d_input")
    p.add_argument("--n-train", type=int, default=4, dest="n_train")
    p.add_argument("--n-eval", type=int, default=2, dest="n_eval")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--n-layers", type=int, default=1, dest="n_layers")
    p.add_argument("--n-heads", type=int, default=1, dest="n_heads")
    return parser


def _cmd_verify(args) -> int:
    selected = [
        name
        for name, on in (
            ("kernels", args.kernels),
            ("scan", args.scan),
            ("aaren", args.aaren),
            ("grad", args.grad),
        )
        if on
    ]
    if not selected:
        selected = ["kernels", "scan", "aaren", "grad"]
    names = []
    for name in selected:
        names.append(name)
        if name == "aaren":
            names.append("serialization")
    results, reports = verify.run_suites(names, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.detail})")
    for report in reports:
        print(json.dumps(dataclasses.asdict(report)))
    failed = sum(1 for r in results if not r.passed)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def _cmd_bench(args) -> int:
    values = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                values = json.load(fh)
        except OSError as exc:
            print(f"IoError: cannot read config: {exc}", file=sys.stderr)
            return 2
        except json.JSONDecodeError as exc:
            print(f"IoError: config is not valid JSON: {exc}", file=sys.stderr)
            return 2
        allowed = {f.name for f in dataclasses.fields(bench.BenchConfig)}
        unknown = set(values) - allowed
        if unknown:
            print(f"config error: unknown keys {sorted(unknown)}", file=sys.stderr)
            return 2
    for name in ("d_model", "n_heads", "n_layers", "max_tokens", "seed", "precision"):
        flag = getattr(args, name)
        if flag is not None:
            values[name] = flag
    defaults = {"d_model": 32, "n_heads": 2, "n_layers": 2, "max_tokens": 256, "seed": 0}
    for name, default in defaults.items():
        values.setdefault(name, default)
    try:
        config = bench.BenchConfig(**values)
    except (InvalidConfig, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    records = bench.run_streaming_bench(config)
    try:
        bench.write_csv(records, args.out)
    except OSError as exc:
        print(f"IoError: cannot write {args.out}: {exc}", file=sys.stderr)
        return 2

    n = config.max_tokens
    a_state = [r.state_scalars for r in records if r.model == bench.AAREN]
    t_state = [r.state_scalars for r in records if r.model == bench.TRANSFORMER_KV]
    print(f"wrote {len(records)} records to {args.out}")
    print(f"state scalars at t={n}: {bench.AAREN}={a_state[-1]} (flat), "
          f"{bench.TRANSFORMER_KV}={t_state[-1]} (grows per token)")
    if n >= 128:
        half, full = n // 2, n
        ra = bench.cumulative_madds_at(records, bench.AAREN, full) / bench.cumulative_madds_at(records, bench.AAREN, half)
        rt = bench.cumulative_madds_at(records, bench.TRANSFORMER_KV, full) / bench.cumulative_madds_at(records, bench.TRANSFORMER_KV, half)
        print(f"cumulative madds growth t={half}->{full}: {bench.AAREN} x{ra:.2f}, "
              f"{bench.TRANSFORMER_KV} x{rt:.2f}")
    return 0


def _format_item(x, op: str) -> str:
    if op == "attention":
        m, u, w = x.m, x.u, x.w
        return f"(m={float(m):+.3f} u={float(u):.3f} w0={float(w[0]):+.3f})"
    return f"{x:6g}" if op == "sum" else f"{x:4g}"


def _cmd_scan_demo(args) -> int:
    n = args.n
    if n < 1:
        print("scan-demo: --n must be >= 1", file=sys.stderr)
        return 2
    if args.op == "attention":
        rng = make_rng(args.seed)
        scores = rng.normal(size=n)
        values = rng.normal(size=(n, 1))
        items = [scan.leaf(scores[i], values[i]) for i in range(n)]
        op = scan.combine
    else:
        items = list(range(1, n + 1))
        op = (lambda a, b: a + b) if args.op == "sum" else max

    plan = scan.scan_plan(n)
    print(f"n={n} op={args.op} rounds={plan.rounds} offsets={list(plan.offsets)}")
    z = list(items)
    print("input   " + "  ".join(_format_item(x, args.op) for x in z))
    for offset in plan.offsets:
        z = [z[j] if j < offset else op(z[j - offset], z[j]) for j in range(n)]
        print(f"off={offset:<4}" + "  ".join(_format_item(x, args.op) for x in z))
    if args.op == "attention":
        print("prefix outputs (w/u):")
        print("  " + "  ".join(f"{float(e.w[0] / e.u):+.4f}" for e in z))
    return 0


def _cmd_train_toy(args) -> int:
    spec = tasks.TaskSpec(
        kind=args.task,
        seq_len=args.seq_len,
        d_input=args.d_input,
        n_train=args.n_train,
        n_eval=args.n_eval,
        seed=args.seed,
    )
    try:
        log = tasks.train(
            args.model,
            spec,
            steps=args.steps,
            lr=args.lr,
            momentum=args.momentum,
            n_layers=args.n_layers,
            n_heads=args.n_heads,
        )
    except DivergedLoss as exc:
        partial = tasks.TrainLog(
            entries=getattr(exc, "entries", []),
            final_eval=float("nan"),
            config_hash="",
            seed=args.seed,
        )
        try:
            tasks.write_train_log(partial, args.log)
        except OSError:
            pass
        print(f"diverged: {exc}", file=sys.stderr)
        return 1
    try:
        tasks.write_train_log(log, args.log)
    except OSError as exc:
        print(f"IoError: cannot write {args.log}: {exc}", file=sys.stderr)
        return 2
    first, last = log.entries[0]["loss"], log.entries[-1]["loss"]
    print(f"{args.model} on {args.task}: loss {first:.6f} -> {last:.6f} "
          f"({len(log.entries)} logged points), eval {log.final_eval:.6f}")
    print(f"log written to {args.log} (config {log.config_hash})")
    return 0


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "bench":
        return _cmd_bench(args)
    if args.command == "scan-demo":
        return _cmd_scan_demo(args)
    return _cmd_train_toy(args)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
