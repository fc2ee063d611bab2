"""Timing comparison of the simulation kernels (compiled vs pure numpy).

The forward pass dominates calibration, decision, and sweep runtimes, so
this is the loop worth measuring. Both kernels produce identical spike
counts; the benchmark reports per-call wall time and the speedup of the
compiled kernel over the numpy fallback.

Usage:
    python benchmarks/bench_forward.py [--batch 600] [--steps 80] ...
"""

import argparse
import time

import numpy as np

from spikecp.backend import available_kernels
from spikecp.snn import Architecture, ModelParams


def build_case(batch, steps, channels, hidden, classes, seed):
    arch = Architecture((channels, hidden, classes))
    rng = np.random.default_rng(seed)
    model = ModelParams(arch, rng.normal(0.0, 0.2, arch.param_count))
    inputs = np.ascontiguousarray(
        (rng.random((batch, steps, channels)) < 0.2).astype(np.float64)
    )
    checkpoints = np.asarray(
        [steps // 4, steps // 2, 3 * steps // 4, steps], dtype=np.int64
    )
    return arch, model, inputs, checkpoints


def time_kernel(kernel, arch, model, inputs, checkpoints, repeats):
    weights = model.layer_weights()
    args = (inputs, weights, arch.beta_syn, arch.beta_mem, arch.threshold, checkpoints)
    kernel(*args)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        result = kernel(*args)
        best = min(best, time.perf_counter() - start)
    return best, result


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=600)
    parser.add_argument("--steps", type=int, default=80)
    parser.add_argument("--channels", type=int, default=40)
    parser.add_argument("--hidden", type=int, default=32)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    case = build_case(args.batch, args.steps, args.channels, args.hidden, args.classes, args.seed)
    kernels = available_kernels()
    print(
        f"batch={args.batch} steps={args.steps} "
        f"layers={args.channels}-{args.hidden}-{args.classes} repeats={args.repeats}"
    )
    timings, outputs = {}, {}
    for name, kernel in kernels.items():
        timings[name], outputs[name] = time_kernel(kernel, *case, repeats=args.repeats)
        print(f"  {name:7s} {timings[name] * 1e3:9.2f} ms/call")
    if len(outputs) == 2:
        agree = np.array_equal(outputs["python"], outputs["cython"])
        print(f"  outputs identical: {agree}")
        print(f"  speedup (cython over python): {timings['python'] / timings['cython']:.2f}x")
    else:
        print("  compiled kernel not available; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
