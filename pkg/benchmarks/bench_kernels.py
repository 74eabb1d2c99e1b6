"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--size S]
"""

import argparse
import time

import numpy as np

from ehdr import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(size, rng):
    c, k = 16, 3
    x = rng.standard_normal((1, c, size, size)).astype(np.float32)
    off = rng.normal(0, 1.5, (1, 2 * k * k, size, size)).astype(np.float32)
    dvals = rng.standard_normal((1, c, k * k, size * size)).astype(np.float32)
    frames = np.cumsum(rng.normal(0, 0.15, (41, size * size)), axis=0)
    times = np.arange(41, dtype=np.float64) * 250.0
    return {
        "deform_sample": lambda: kernels.deform_sample(x, off, k, k, 1, 1, size, size),
        "deform_sample_backward": lambda: kernels.deform_sample_backward(x, off, dvals, k, k, 1, 1, size, size),
        "simulate_pixels": lambda: kernels.simulate_pixels(frames, times, 0.2),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    fns = cases(args.size, rng)
    prev = kernels.BACKEND
    results = {}
    for name in sorted(kernels.BACKENDS):
        kernels.use_backend(name)
        for case, fn in fns.items():
            fn()  # warm up
            results[case, name] = best_of(fn, args.repeat)
    kernels.use_backend(prev)

    if "compiled" not in kernels.BACKENDS:
        print("compiled kernels not built; showing the numpy fallback only")
    print(f"{'kernel':<24}{'python (ms)':>14}{'compiled (ms)':>16}{'speedup':>10}")
    for case in fns:
        py = results[case, "python"] * 1e3
        if (case, "compiled") in results:
            cc = results[case, "compiled"] * 1e3
            print(f"{case:<24}{py:>14.2f}{cc:>16.2f}{py / cc:>9.1f}x")
        else:
            print(f"{case:<24}{py:>14.2f}{'-':>16}{'-':>10}")


if __name__ == "__main__":
    main()
