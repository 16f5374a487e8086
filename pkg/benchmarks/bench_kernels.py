"""Benchmark the hot kernels on both backends at training-loop shapes.

Runs every kernel under the numba dispatch and under the forced-numpy
dispatch (DISTILRET_NO_NUMBA=1) in separate subprocesses, since the
backend is chosen at import time, then prints one table with the per-call
times and the speedup. Shapes mirror one training step of the shipped
recipe: 2000-passage corpus, 128-dim embeddings, batch of 16 questions
with 256 retrieved candidates.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--json]
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

VOCAB_ROWS = 504
D_EMB = 128
CORPUS = 2000
TOPK = 256
N_BAGS = 272  # 16 questions + 256 candidate passages
BAG_LEN = 30


def make_inputs(rng: np.random.Generator) -> dict:
    lengths = rng.integers(5, BAG_LEN + 1, size=N_BAGS)
    flat_ids = rng.integers(0, VOCAB_ROWS, size=int(lengths.sum())).astype(np.int64)
    offsets = np.zeros(N_BAGS + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return {
        "table": rng.standard_normal((VOCAB_ROWS, D_EMB)),
        "flat_ids": flat_ids,
        "offsets": offsets,
        "bag_grads": rng.standard_normal((N_BAGS, D_EMB)),
        "rows": rng.standard_normal((CORPUS, D_EMB)).astype(np.float32),
        "query": rng.standard_normal(D_EMB).astype(np.float32),
        "param": rng.standard_normal((VOCAB_ROWS, D_EMB)),
        "grad": rng.standard_normal((VOCAB_ROWS, D_EMB)),
        "m": np.zeros((VOCAB_ROWS, D_EMB)),
        "v": np.zeros((VOCAB_ROWS, D_EMB)),
    }


def time_call(fn, repeats: int) -> float:
    """Median wall time per call in milliseconds, after a warmup call."""
    fn()  # warmup; first numba call includes JIT compilation
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    return statistics.median(samples)


def run_worker(repeats: int) -> None:
    from distilret import kernels

    rng = np.random.default_rng(7)
    x = make_inputs(rng)
    grad_table = np.zeros_like(x["table"])

    timings = {
        "backend": "numba" if kernels.NUMBA_ENABLED else "numpy",
        "bag_mean_batch": time_call(
            lambda: kernels.bag_mean_batch(x["table"], x["flat_ids"], x["offsets"]),
            repeats),
        "scatter_mean_bags": time_call(
            lambda: kernels.scatter_mean_bags(grad_table, x["flat_ids"],
                                              x["offsets"], x["bag_grads"]),
            repeats),
        "topk_dot": time_call(
            lambda: kernels.topk_dot(x["rows"], x["query"], TOPK), repeats),
        "adam_step": time_call(
            lambda: kernels.adam_step(x["param"], x["grad"], x["m"], x["v"],
                                      1e-3, 0.9, 0.999, 1e-8, 100), repeats),
    }
    print(json.dumps(timings))


def run_backend(force_numpy: bool, repeats: int) -> dict:
    env = dict(os.environ)
    env["DISTILRET_NO_NUMBA"] = "1" if force_numpy else "0"
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__),
         "--backend-worker", "--repeats", str(repeats)],
        capture_output=True, text=True, env=env, check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50,
                        help="timed calls per kernel (median reported)")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output")
    parser.add_argument("--backend-worker", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.backend_worker:
        run_worker(args.repeats)
        return 0

    fast = run_backend(force_numpy=False, repeats=args.repeats)
    slow = run_backend(force_numpy=True, repeats=args.repeats)
    kernels = [k for k in fast if k != "backend"]

    if fast["backend"] != "numba":
        print("warning: numba unavailable, comparing numpy against itself",
              file=sys.stderr)

    if args.json:
        print(json.dumps({"repeats": args.repeats, fast["backend"]: fast,
                          "numpy": slow}, indent=2, sort_keys=True))
        return 0

    name_w = max(len(k) for k in kernels)
    print(f"{'kernel'.ljust(name_w)}  {fast['backend']:>10}  {'numpy':>10}  speedup")
    for k in kernels:
        ratio = slow[k] / fast[k] if fast[k] > 0 else float("inf")
        print(f"{k.ljust(name_w)}  {fast[k]:>8.3f}ms  {slow[k]:>8.3f}ms  {ratio:6.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
