"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N wall time for each backend and
the speed-up.  The first numba call is excluded (JIT warm-up).
"""
import argparse
import timeit

import numpy as np

from rddlite import kernels


def cases(rng):
    maps = rng.normal(size=(4, 64, 64, 16))
    pts = rng.uniform(0, 63, size=(4, 2048, 2))
    g_bil = rng.normal(size=(4, 2048, 16))

    shapes = np.array([[32, 32], [16, 16], [8, 8]])
    starts = np.concatenate([[0], np.cumsum(shapes.prod(1))[:-1]])
    M, Q, L, K, D = 4, 1024, 3, 4, 8
    value = rng.normal(size=(M, int(shapes.prod(1).sum()), D))
    locs = rng.uniform(-1, 32, size=(M, Q, L, K, 2))
    attn = rng.dirichlet(np.ones(L * K), size=(M, Q)).reshape(M, Q, L, K)
    g_msda = rng.normal(size=(M, Q, D))

    cols = rng.normal(size=(63, 63, 3, 3, 16))
    S = rng.uniform(size=(256, 256))
    return {
        "bilinear_forward": lambda: kernels.bilinear_forward(maps, pts),
        "bilinear_backward": lambda: kernels.bilinear_backward(maps, pts, g_bil),
        "msda_forward": lambda: kernels.msda_forward(value, shapes, starts, locs, attn),
        "msda_backward": lambda: kernels.msda_backward(value, shapes, starts, locs, attn, g_msda),
        "col2im": lambda: kernels.col2im(cols, 65, 65, 1),
        "nms_mask 5x5": lambda: kernels.nms_mask(S, 5, 0.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fns = cases(np.random.default_rng(0))
    print(f"{'kernel':<20}{'numba ms':>11}{'numpy ms':>11}{'speed-up':>10}")
    for name, fn in fns.items():
        best = {}
        for backend in ("numba", "numpy"):
            with kernels.use_backend(backend):
                fn()
                best[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{best['numba']:>11.2f}{best['numpy']:>11.2f}"
              f"{best['numpy'] / best['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
