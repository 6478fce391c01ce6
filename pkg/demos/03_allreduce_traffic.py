#!/usr/bin/env python3
"""The three interserver allreduce algorithms and their traffic accounting.

Every algorithm must leave the elementwise sum on every server; ring and
halving/doubling must also send exactly 2*(p-1)/p * b bytes per server.
The step counts differ: 2(p-1) for ring vs 2*log2(p) for halving/doubling,
which is what makes the latter attractive in latency-limited regimes.
"""

import numpy as np

from mbsgd.collectives import (
    Topology,
    allreduce,
    bandwidth_requirement,
    direct_sum,
    is_power_of_two,
    predict_bytes,
    predict_steps,
)

rng = np.random.default_rng(0)

print("algo    p   buffer_bytes  steps  payload/server  predicted")
for p in (2, 3, 4, 6, 8):
    elems = 128 * p
    bufs = [rng.standard_normal(elems) for _ in range(p)]
    want = direct_sum(bufs)
    b = elems * 8
    for algo in ("ring", "hd", "blocks"):
        if algo == "hd" and not is_power_of_two(p):
            continue
        results, report = allreduce(algo, Topology(p, 1), bufs)
        assert all(np.allclose(r, want, rtol=1e-12) for r in results)
        predicted = predict_bytes(p, b)
        print(
            f"{algo:6s} {p:3d}  {b:12d}  {max(report.steps):5d}  "
            f"{max(report.bytes_sent):14d}  {predicted:9.0f}"
        )

print()
print("step-count scaling (the latency story):")
print("p      ring 2(p-1)   halving/doubling 2*log2(p)")
for p in (2, 4, 8, 16, 32):
    print(f"{p:3d}    {predict_steps('ring', p):10d}   {predict_steps('hd', p):10d}")

print()
print("bandwidth arithmetic for a 25M-parameter float32 model,")
print("backprop time 125 ms:")
rate = bandwidth_requirement(25_000_000, 4, 0.125)
print(f"  parameter buffer: {25_000_000 * 4 / 1e6:.0f} MB")
print(f"  peak requirement: {rate / 1e9:.1f} Gbit/s "
      f"(allreduce moves ~2x the buffer over the wire)")
