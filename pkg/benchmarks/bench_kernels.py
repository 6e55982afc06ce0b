"""Benchmark the compiled sampling kernel against the numpy fallback.

The bilinear gather is the toolkit's hot inner loop: feature-volume lifting
samples every in-bounds voxel of every view each frame. Run:

    python benchmarks/bench_kernels.py

Set CROSSVIEW_NO_NATIVE=1 to confirm the fallback path selects itself.
"""

import time

import numpy as np

from crossview import kernels


def time_fn(fn, *args, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.backend_name()}")
    print(f"{'case':<34}{'numpy':>12}{'native':>12}{'speedup':>10}")
    cases = [
        ("lift: 32ch 364x364, 5k voxels", (32, 364, 364), 5_000),
        ("lift: 32ch 364x364, 20k voxels", (32, 364, 364), 20_000),
        ("lift: 32ch 168x168, 20k voxels", (32, 168, 168), 20_000),
        ("crop: 1ch 256x192, 133k pixels", (1, 192, 256), 133_000),
        ("prior: 1ch 200x200, 2.3k rays", (1, 200, 200), 2_304),
    ]
    for label, shape, n in cases:
        fmap = rng.normal(size=shape)
        u = rng.uniform(-5, shape[2] + 5, size=n)
        v = rng.uniform(-5, shape[1] + 5, size=n)
        t_np = time_fn(kernels.bilinear_gather_numpy, fmap, u, v)
        if kernels.USING_NATIVE:
            fmap_c = np.ascontiguousarray(fmap)
            t_nat = time_fn(kernels._native.bilinear_gather, fmap_c, u, v)
            assert np.array_equal(kernels.bilinear_gather_numpy(fmap, u, v),
                                  kernels._native.bilinear_gather(fmap_c, u, v)), \
                "backends disagree"
            print(f"{label:<34}{t_np * 1e3:>10.2f}ms{t_nat * 1e3:>10.2f}ms"
                  f"{t_np / t_nat:>9.1f}x")
        else:
            print(f"{label:<34}{t_np * 1e3:>10.2f}ms{'n/a':>12}{'':>10}")


if __name__ == "__main__":
    main()
