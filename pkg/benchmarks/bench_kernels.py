"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once per backend to warm up (numba compiles on first call),
then ``--repeat`` times; the best wall time is reported.
"""

import argparse
import time

import numpy as np

from misreg import _kernels, loopsim


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((64, 81, 81))
    p = loopsim.LoopParams.from_rate(1000.0, 0.4, 0.01, 50)
    b = np.eye(50) + 0.02 * rng.standard_normal((50, 50))
    u = rng.standard_normal((4096, 50))
    x = rng.standard_normal(20000)
    return {
        "window_slopes 64x(81x81)": lambda: _kernels.window_slopes(phi, 20, 4, 0.09),
        "closed_loop 4096 frames, 50 modes": lambda: loopsim.integrate_loop(b, u, p),
        "sliding_mean 20000, half 25": lambda: _kernels.sliding_mean(x, 25),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    prev = _kernels.backend()
    print(f"{'kernel':<36}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    try:
        for name, fn in cases().items():
            t = {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                t[backend] = best_of(fn, args.repeat)
            print(f"{name:<36}{1e3 * t['numpy']:>12.2f}{1e3 * t['numba']:>12.2f}{t['numpy'] / t['numba']:>9.1f}x")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
