"""Time every kernel on each available backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--scale S]
"""

import argparse
import timeit

import numpy as np

from rvdiff import kernels


def cases(scale: int):
    r = np.random.default_rng(0)
    n = 120_000 * scale
    pix = r.integers(0, 64 * 1024, n).astype(np.int64)
    depth = r.uniform(1, 80, n)
    x, y = r.uniform(-60, 60, n), r.uniform(-60, 60, n)
    lab = r.integers(0, 20, n).astype(np.int64)
    fa, fb = r.standard_normal((200 * scale, 36)), r.standard_normal((200 * scale, 36))
    dirs = r.standard_normal((32 * 256 * scale, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo = r.uniform(-20, 10, (8, 3))
    hi = lo + r.uniform(0.5, 8, (8, 3))
    return {
        "scatter_nearest": lambda m: m.scatter_nearest(pix, depth, 64 * 1024),
        "bev_counts": lambda m: m.bev_counts(x, y, lab, -50.0, 50.0, -50.0, 50.0, 16, 20),
        "poly3_kernel_sum": lambda m: m.poly3_kernel_sum(fa, fb, 1.0 / 36),
        "raycast": lambda m: m.raycast(dirs, -1.73, lo, hi, 80.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1)
    args = ap.parse_args()

    backends = kernels.backends()
    names = sorted(backends)
    print(f"{'kernel':<18}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for kernel, fn in cases(args.scale).items():
        ms = {}
        for name in names:
            mod = backends[name]
            fn(mod)  # warm up
            ms[name] = 1e3 * min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        speed = f"{ms['python'] / ms['compiled']:>9.1f}x" if "compiled" in ms else f"{'-':>10}"
        print(f"{kernel:<18}" + "".join(f"{ms[n]:>14.2f}" for n in names) + speed)


if __name__ == "__main__":
    main()
