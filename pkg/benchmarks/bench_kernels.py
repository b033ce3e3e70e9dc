"""Time every hot kernel on its numba and pure-numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--rows 4096] [--width 64]

Prints one line per kernel with the median wall time of each path, the
speed-up and the max abs difference between the two results. The numba
timings exclude compilation (each kernel is warmed up first).
"""
import argparse
import statistics
import time

import numpy as np

from cfquant import _kernels as K


def _time(fn, args, repeat):
    fn(*args)
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(rows, width, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, width))
    dy = rng.standard_normal((rows, width))
    _, s = K.NUMPY_KERNELS["silu_forward"](x)
    gamma, beta = rng.standard_normal(width), rng.standard_normal(width)
    _, xhat, rstd = K.NUMPY_KERNELS["layernorm_forward"](x, gamma, beta, 1e-5)
    n = rows * 16
    tau, resid = rng.uniform(0.01, 0.99, n), rng.standard_normal(n)
    xs, zs, ys = rng.random(n * 4), rng.random((n * 4, 1)), rng.standard_normal(n * 4)
    return {
        "silu_forward": (x,),
        "silu_backward": (dy, x, s),
        "layernorm_forward": (x, gamma, beta, 1e-5),
        "layernorm_backward": (dy, xhat, rstd, gamma),
        "pinball": (tau, resid),
        "window_stats": (xs, zs, ys, 0.5, np.array([0.5]), 0.0, 0.01),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--width", type=int, default=64)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable (or CFQUANT_DISABLE_NUMBA set); timing the numpy path only")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}{'max diff':>12}")
    for name, call_args in cases(args.rows, args.width).items():
        t_np = _time(K.NUMPY_KERNELS[name], call_args, args.repeat)
        if K.HAVE_NUMBA:
            fn = K.NUMBA_KERNELS[name]
            t_nb = _time(fn, call_args, args.repeat)
            diff = _maxdiff(K.NUMPY_KERNELS[name](*call_args), fn(*call_args))
            print(f"{name:<20}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>10.2f}{diff:>12.2e}")
        else:
            print(f"{name:<20}{t_np * 1e3:>10.3f}{'-':>10}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
