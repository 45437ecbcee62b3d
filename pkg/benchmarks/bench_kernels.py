"""Compare the compiled im2col/col2im kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from blindnet._core import fallback

try:
    from blindnet._core import _kernels as compiled
except ImportError:
    compiled = None

# (N, C, H, W, k, stride, pad): shapes met in a training step of the default model
CASES = [
    (24, 3, 48, 48, 4, 2, 1),
    (24, 32, 24, 24, 4, 2, 1),
    (24, 64, 12, 12, 3, 1, 1),
    (24, 64, 12, 12, 4, 2, 1),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if compiled is None:
        print("compiled kernels not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':34} {'op':7} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n, c, h, w, k, s, p in CASES:
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        cols = fallback.im2col(x, k, k, s, p)
        if compiled is not None:
            assert np.array_equal(cols, compiled.im2col(x, k, k, s, p))
        for op, args_ in (("im2col", (x, k, k, s, p)), ("col2im", (cols, c, h, w, k, k, s, p))):
            t_py = bench(lambda: getattr(fallback, op)(*args_), args.repeat)
            if compiled is None:
                print(f"{str((n, c, h, w, k, s, p)):34} {op:7} {t_py:10.3f} {'-':>10} {'-':>8}")
                continue
            t_cy = bench(lambda: getattr(compiled, op)(*args_), args.repeat)
            print(f"{str((n, c, h, w, k, s, p)):34} {op:7} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.2f}x")


if __name__ == "__main__":
    main()
