"""Compare the compiled and numpy back ends on the hot loops.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per kernel and back end, the speed-up, and whether
the two back ends agree bitwise.
"""

import argparse
import time

import numpy as np

from raplab.kernels import implementations


def _time(fn, repeat):
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best.append(time.perf_counter() - t0)
    return float(np.median(best)), out


def cases(rng):
    xs = rng.standard_normal((3000, 4 * 2 * 32 * 32)).astype(np.float32)
    q = rng.standard_normal(xs.shape[1]).astype(np.float32)
    u0 = np.clip(1.0 - 0.5 * rng.random((32, 32)), 0, 1.5)
    v0 = np.clip(0.25 * rng.random((32, 32)), 0, 1.5)
    x = rng.standard_normal((8, 32, 32, 16)).astype(np.float32)
    cols = rng.standard_normal((8 * 32 * 32, 9 * 16)).astype(np.float32)

    def scan(m):
        out = np.empty(len(xs))
        m.scan_scores(xs, q, out, 0, len(xs))
        return out

    return {
        "scan_scores 3000x8192": scan,
        "gray_scott 2000 steps 32x32": lambda m: m.gray_scott_run(u0, v0, 0.16, 0.08, 0.035, 0.065, 1.0, 2000, 100)[0],
        "advection_diffusion 2000 steps 32x32": lambda m: m.advection_diffusion_run(u0, 0.3, -0.2, 0.1, 1.0, 2000, 100)[0],
        "im2col 8x32x32x16 k3": lambda m: m.im2col(x, 3, 1),
        "col2im 8x32x32x16 k3": lambda m: m.col2im(cols, 8, 32, 32, 16, 3, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy back end is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s} {'bitwise':>8s}")
    for name, fn in cases(rng).items():
        t_py, out_py = _time(lambda: fn(impls["python"]), args.repeat)
        if "cython" in impls:
            t_cy, out_cy = _time(lambda: fn(impls["cython"]), args.repeat)
            same = np.array_equal(out_py, out_cy)
            print(f"{name:40s} {1e3 * t_py:10.2f} {1e3 * t_cy:10.2f} {t_py / t_cy:8.1f}x {str(same):>8s}")
        else:
            print(f"{name:40s} {1e3 * t_py:10.2f} {'-':>10s}")


if __name__ == "__main__":
    main()
