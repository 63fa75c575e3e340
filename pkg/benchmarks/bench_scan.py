#!/usr/bin/env python3
"""Benchmark the gadget-span kernel: jitted loop versus pure numpy.

Usage: python benchmarks/bench_scan.py [--size N] [--depth D] [--repeats R]
"""

import argparse
import time

import numpy as np

from piecewise import _scan


def bench(impl: str, opcodes: np.ndarray, depth: int, repeats: int) -> float:
    _scan.find_gadget_spans(opcodes, depth, impl=impl)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        _scan.find_gadget_spans(opcodes, depth, impl=impl)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=4_000_000,
                        help="number of instructions to scan")
    parser.add_argument("--depth", type=int, default=5)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    opcodes = rng.integers(1, 0x0E, size=args.size, dtype=np.uint8)
    # sprinkle in trap bytes like a debloated image would have
    trap_at = rng.random(args.size) < 0.05
    opcodes[trap_at] = _scan.TRAP

    spans_np = _scan.find_gadget_spans(opcodes, args.depth, impl="numpy")
    print(f"{args.size:,} instructions, depth {args.depth}: "
          f"{spans_np[0].shape[0]:,} candidate spans")

    t_numpy = bench("numpy", opcodes, args.depth, args.repeats)
    print(f"numpy : {t_numpy * 1000:8.2f} ms")
    if _scan.HAS_NUMBA:
        t_numba = bench("numba", opcodes, args.depth, args.repeats)
        spans_nb = _scan.find_gadget_spans(opcodes, args.depth, impl="numba")
        assert np.array_equal(np.sort(spans_np[0]), np.sort(spans_nb[0]))
        print(f"numba : {t_numba * 1000:8.2f} ms  ({t_numpy / t_numba:.2f}x vs numpy)")
    else:
        print("numba : not available")


if __name__ == "__main__":
    main()
