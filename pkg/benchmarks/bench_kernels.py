"""Time the compiled and numpy dense-layer kernels on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Prints per-call microseconds for forward and backward passes, the speedup of
the compiled backend, and the largest absolute difference between backends.
"""
import argparse
import timeit

import numpy as np

from kgrl.kernels import ACT_RELU, get_backend

SHAPES = [  # (batch, fan_in, fan_out)
    (1, 21, 64),
    (256, 21, 64),
    (256, 64, 64),
    (256, 512, 512),
    (256, 512, 6),
]


def bench(fwd, bwd, x, W, b, g, repeat):
    out, _ = fwd(x, W, b, ACT_RELU)
    t_f = min(timeit.repeat(lambda: fwd(x, W, b, ACT_RELU), number=repeat, repeat=3)) / repeat
    t_b = min(timeit.repeat(lambda: bwd(x, W, out, g, ACT_RELU, True), number=repeat, repeat=3)) / repeat
    return out, bwd(x, W, out, g, ACT_RELU, True), t_f, t_b


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    try:
        compiled = get_backend("cython")
    except ImportError:
        print("compiled kernels not built; nothing to compare")
        return
    numpy_ = get_backend("numpy")
    print(f"{'shape':>18} {'numpy fwd':>10} {'cy fwd':>8} {'x':>5} {'numpy bwd':>10} {'cy bwd':>8} {'x':>5} {'max|diff|':>10}")
    for batch, n_in, n_out in SHAPES:
        x = rng.normal(size=(batch, n_in))
        W = rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)
        b = rng.normal(size=n_out)
        g = rng.normal(size=(batch, n_out))
        o1, (dW1, db1, dx1), f1, b1 = bench(*numpy_, x, W, b, g, args.repeat)
        o2, (dW2, db2, dx2), f2, b2 = bench(*compiled, x, W, b, g, args.repeat)
        diff = max(np.abs(a - c).max() for a, c in [(o1, o2), (dW1, dW2), (db1, db2), (dx1, dx2)])
        print(f"{str((batch, n_in, n_out)):>18} {f1 * 1e6:10.1f} {f2 * 1e6:8.1f} {f1 / f2:5.2f} "
              f"{b1 * 1e6:10.1f} {b2 * 1e6:8.1f} {b1 / b2:5.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
