"""Benchmark the compiled geometry kernels against the NumPy fallback.

Run: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from rimae.kernels import reference

try:
    from rimae.kernels import _native as native
except ImportError:
    native = None


def timeit(fn, *args, repeats=5, min_time=0.2):
    # warm up, then repeat the call until min_time has elapsed
    fn(*args)
    best = float("inf")
    for _ in range(repeats):
        count = 0
        start = time.perf_counter()
        while True:
            fn(*args)
            count += 1
            elapsed = time.perf_counter() - start
            if elapsed >= min_time / repeats:
                break
        best = min(best, elapsed / count)
    return best


def row(label, ref_fn, nat_fn, *args):
    t_ref = timeit(ref_fn, *args)
    if nat_fn is None:
        print(f"{label:34s} {t_ref * 1e3:9.3f} ms        --        --")
        return
    t_nat = timeit(nat_fn, *args)
    print(
        f"{label:34s} {t_ref * 1e3:9.3f} ms {t_nat * 1e3:9.3f} ms {t_ref / t_nat:8.1f}x"
    )


def main():
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'reference':>12s} {'native':>12s} {'speedup':>9s}")

    pts_1k = rng.standard_normal((1024, 3))
    pts_256 = rng.standard_normal((256, 3))
    queries_64 = pts_1k[:64]
    sym = rng.standard_normal((3, 3))
    sym = (sym + sym.T) / 2
    patch = rng.standard_normal((32, 3))
    normals = rng.standard_normal((32, 3))
    normals /= np.linalg.norm(normals, axis=1)[:, None]

    nat = native if native is not None else None
    row("fps n=1024 -> 64", lambda: reference.fps(pts_1k, 64),
        (lambda: nat.fps(pts_1k, 64)) if nat else None)
    row("fps n=256 -> 16", lambda: reference.fps(pts_256, 16),
        (lambda: nat.fps(pts_256, 16)) if nat else None)
    row("knn n=1024 q=64 k=32", lambda: reference.knn(pts_1k, queries_64, 32),
        (lambda: nat.knn(pts_1k, queries_64, 32)) if nat else None)
    row("jacobi_eig3", lambda: reference.jacobi_eig3(sym),
        (lambda: nat.jacobi_eig3(sym)) if nat else None)
    row("pod_bin k=32 grid=6", lambda: reference.pod_bin(patch, normals, 6),
        (lambda: nat.pod_bin(patch, normals, 6)) if nat else None)

    if native is None:
        print("\ncompiled extension not available; only the fallback was timed")


if __name__ == "__main__":
    main()
