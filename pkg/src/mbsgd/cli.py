"""Command-line entry point: train, bench, cost-report, and verify.

All CSV output is UTF-8 with LF line endings; effective settings are echoed
as '#'-prefixed comment lines ahead of the header. The MBSGD_SEED
environment variable supplies default seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .collectives import (
    ALGORITHMS,
    HALVING_DOUBLING,
    Topology,
    allreduce,
    bandwidth_requirement,
    is_power_of_two,
    predict_bytes,
)
from .config import ConfigError, ExperimentConfig
from .engine import PITFALLS
from .verify import format_table, run_checks

BENCH_HEADER = "algo,p,buffer_bytes,steps,payload_bytes,padding_bytes,wall_seconds"


def cmd_train(args) -> int:
    try:
        if args.config:
            cfg = ExperimentConfig.load(args.config)
        else:
            cfg = ExperimentConfig.defaults()
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            key, _, raw = item.partition("=")
            cfg.set(key.strip(), raw.strip())
        cfg.validate()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    engine = cfg.build_engine()
    record = engine.train()
    out_path = args.output or cfg.values["output.path"]
    record.to_csv(out_path, comments=cfg.comment_lines())

    lrs = record.lrs()
    print(f"wrote {len(record.rows)} iterations to {out_path}")
    print(
        f"final train loss {record.train_losses()[-1]:.6f}, "
        f"final eval loss {record.eval_losses()[-1]:.6f}"
    )
    print(
        f"lr schedule: start {lrs[0]:g}, peak {max(lrs):g}, final {lrs[-1]:g} "
        f"({cfg.values['solver.warmup']} warmup, milestones "
        f"{list(cfg.values['solver.milestones'])})"
    )
    return 0


def cmd_bench(args) -> int:
    algos = args.algo.split(",")
    for algo in algos:
        if algo not in ALGORITHMS:
            print(
                f"error: unknown algorithm {algo!r} (choose from {', '.join(ALGORITHMS)})",
                file=sys.stderr,
            )
            return 2
    servers = [int(p) for p in args.p.split(",")]
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(int(os.environ.get("MBSGD_SEED", "1")))

    lines = []
    for algo in algos:
        for p in servers:
            if algo == HALVING_DOUBLING and not is_power_of_two(p):
                print(
                    f"error: halving/doubling requires a power-of-two server count "
                    f"(got p={p}); use the binary blocks algorithm instead",
                    file=sys.stderr,
                )
                return 1
            for size in sizes:
                if size % 8:
                    print(f"error: buffer size {size} not a multiple of 8 bytes", file=sys.stderr)
                    return 2
                elems = size // 8
                bufs = [rng.standard_normal(elems) for _ in range(p)]
                t0 = time.perf_counter()
                _, report = allreduce(algo, Topology(p, 1), bufs)
                wall = time.perf_counter() - t0
                steps = max(report.steps) if p > 1 else 0
                payload = max(report.bytes_sent) if p > 1 else 0
                padding = max(report.padding_sent) if p > 1 else 0
                lines.append(
                    f"{algo},{p},{size},{steps},{payload},{padding},{wall:.17g}"
                )

    comments = [
        f"analytic: payload_bytes = 2*(p-1)/p * buffer_bytes; "
        f"steps: ring 2(p-1), halving/doubling 2*log2(p)",
    ]
    out = "\n".join(f"# {c}" for c in comments) + "\n" + BENCH_HEADER + "\n" + "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(out)
        print(f"wrote {len(lines)} rows to {args.output}")
    else:
        sys.stdout.write(out)
    return 0


def cmd_cost_report(args) -> int:
    params = int(float(args.params))
    if params <= 0 or args.bytes_per_param <= 0 or args.backprop_seconds <= 0:
        print("error: all cost-report inputs must be positive", file=sys.stderr)
        return 2
    param_bytes = params * args.bytes_per_param
    rate_bits = bandwidth_requirement(params, args.bytes_per_param, args.backprop_seconds)
    per_server = predict_bytes(args.servers, param_bytes)
    print(f"parameters: {params} x {args.bytes_per_param} B = {param_bytes / 1e6:g} MB")
    print(
        f"allreduce per server (p={args.servers}): "
        f"{per_server / 1e6:g} MB sent and received per pass"
    )
    print(
        f"peak bandwidth requirement: 2 x {param_bytes / 1e6:g} MB / "
        f"{args.backprop_seconds:g} s = {rate_bits / 8 / 1e6:g} MB/s, "
        f"or {rate_bits / 1e9:g} Gbit/s"
    )
    if args.link_gbit is not None:
        verdict = "sufficient" if args.link_gbit * 1e9 >= rate_bits else "insufficient"
        print(f"link rate {args.link_gbit:g} Gbit/s is {verdict}")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(pitfall=args.pitfall)
    print(format_table(results))
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mbsgd",
        description="Desk-scale laboratory for large-minibatch distributed synchronous SGD",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config file")
    p_train.add_argument("--config", help="experiment config file (defaults used if omitted)")
    p_train.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    p_train.add_argument("--output", help="CSV path (overrides output.path)")
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("bench", help="measure allreduce traffic against the formulas")
    p_bench.add_argument("--algo", default="ring,hd,blocks", help="comma-separated algorithms")
    p_bench.add_argument("--p", default="2,4,8", help="comma-separated server counts")
    p_bench.add_argument("--sizes", default="1024,65536", help="comma-separated buffer bytes")
    p_bench.add_argument("--output", help="CSV path (stdout if omitted)")
    p_bench.set_defaults(func=cmd_bench)

    p_cost = sub.add_parser("cost-report", help="bandwidth arithmetic for gradient aggregation")
    p_cost.add_argument("--params", default="25e6", help="parameter count")
    p_cost.add_argument("--bytes-per-param", type=int, default=4)
    p_cost.add_argument("--backprop-seconds", type=float, default=0.125)
    p_cost.add_argument("--servers", type=int, default=32)
    p_cost.add_argument("--link-gbit", type=float, default=None, help="available link rate")
    p_cost.set_defaults(func=cmd_cost_report)

    p_verify = sub.add_parser("verify", help="run the oracle suite and print a pass/fail table")
    p_verify.add_argument(
        "--pitfall", default="none", choices=PITFALLS,
        help="inject a deliberately wrong mode; the matching check must fail",
    )
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
