"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeats N]

Times the three hot kernels on workloads shaped like the heavy test cases
(Monte Carlo chains, tile whitening, PNG decoding) and prints both paths
side by side. The numpy timings are what you get under CARD_DISABLE_NUMBA=1.
"""

import argparse
import time

import numpy as np

from card import _kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_transition(rng, repeats):
    n = 100_000 * 16
    xi_next = rng.standard_normal(n)
    xi_hat = rng.standard_normal(n)
    ups = rng.standard_normal(n)
    observed = rng.random(n) < 0.75
    delta = np.where(observed, rng.random(n) + 0.05, 0.0)
    noise = rng.standard_normal(n)
    out = np.empty_like(xi_next)

    def run_numpy():
        _kernels.transition_numpy(xi_next, xi_hat, ups, observed, delta,
                                  0.4, 0.5, 0.8, 1.0, noise, out)

    def run_numba():
        _kernels.transition_numba(xi_next, xi_hat, ups, observed, delta,
                                  0.4, 0.5, 0.8, 1.0, noise, out)

    return "transition (1.6M coords)", run_numpy, run_numba


def bench_tilewise(rng, repeats):
    mat = rng.standard_normal((64, 64))
    side = 8 * 128
    n_tiles = 128 * 128
    src = rng.standard_normal((3, side * side))
    pix = np.arange(side * side, dtype=np.int64).reshape(side, side)
    tiles = np.array([
        pix[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8].reshape(-1)
        for r in range(128) for c in range(128)
    ])
    out = src.copy()

    def run_numpy():
        _kernels.tilewise_matmul_numpy(mat, src, tiles, out)

    def run_numba():
        _kernels.tilewise_matmul_numba(mat, src, tiles, out)

    return f"tilewise matmul ({n_tiles} tiles x 3ch)", run_numpy, run_numba


def bench_unfilter(rng, repeats):
    h, w, ch = 512, 512, 3
    rows = rng.integers(0, 256, size=(h, w * ch * 2 + 1)).astype(np.uint8)
    rows[:, 0] = rng.integers(0, 5, size=h).astype(np.uint8)

    def run_numpy():
        _kernels.unfilter_scanlines_numpy(rows, ch * 2)

    def run_numba():
        out = np.zeros((h, rows.shape[1] - 1), dtype=np.uint8)
        _kernels._unfilter_numba(rows, ch * 2, out)

    return "png unfilter (512x512 rgb16)", run_numpy, run_numba


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<38} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for build in (bench_transition, bench_tilewise, bench_unfilter):
        name, run_numpy, run_numba = build(rng, args.repeats)
        run_numba()  # compile outside the timed region
        t_np = timeit(run_numpy, args.repeats)
        t_nb = timeit(run_numba, args.repeats)
        print(f"{name:<38} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
