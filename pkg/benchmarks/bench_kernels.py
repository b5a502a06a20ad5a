"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the three hot paths (sparse MLP forward+backward, the Adam update, and
the brute-force cosine scan) for both backends and prints a comparison table.
"""

import argparse
import time

import numpy as np

from routekit._kernels import _pykernels

try:
    from routekit._kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeat, warmup=3):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeat):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def scenarios():
    rng = np.random.default_rng(0)
    n, m, e, nnz = 30_000, 256, 7, 12
    w1 = rng.standard_normal((n, m))
    b1 = rng.standard_normal(m)
    w2 = rng.standard_normal((m, e))
    b2 = rng.standard_normal(e)
    idx = np.sort(rng.choice(n, size=nnz, replace=False)).astype(np.int64)
    val = rng.standard_normal(nnz)
    target = rng.uniform(0.1, 1.0, size=e)
    target /= target.sum()
    gw1 = np.zeros_like(w1)
    gb1 = np.zeros_like(b1)
    gw2 = np.zeros_like(w2)
    gb2 = np.zeros_like(b2)

    def train_step(backend):
        h, y = backend.mlp_forward(w1, b1, w2, b2, idx, val)
        backend.mlp_backward(w2, h, y, idx, val, target, 1.0, 0.125,
                             gw1, gb1, gw2, gb2)

    p = rng.standard_normal(64 * 256)
    g = rng.standard_normal(64 * 256)
    mom = np.zeros_like(p)
    vel = np.zeros_like(p)

    def adam(backend):
        backend.adam_update(p, g, mom, vel, 10, 1e-3, 0.9, 0.999, 1e-8, 1e-4)

    mat = np.ascontiguousarray(rng.standard_normal((2000, 64)))
    norms = np.linalg.norm(mat, axis=1)
    q = np.ascontiguousarray(rng.standard_normal(64))

    def knn_scan(backend):
        backend.argmax_cosine(mat, norms, q)

    return [
        ("sparse mlp fwd+bwd (30k x 256 x 7, nnz 12)", train_step),
        ("adam update (16k params)", adam),
        ("cosine scan (2000 x 64)", knn_scan),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    backends = [("python", _pykernels)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    else:
        print("compiled kernels not available; timing the fallback only")

    width = max(len(name) for name, _ in scenarios())
    header = f"{'kernel':<{width}}  " + "".join(f"{name:>12}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, fn in scenarios():
        times = [timeit(lambda b=backend: fn(b), args.repeat)
                 for _, backend in backends]
        row = f"{name:<{width}}  " + "".join(f"{t * 1e6:>10.1f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
