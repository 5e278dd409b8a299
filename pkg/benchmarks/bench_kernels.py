"""Time the compiled kernels against their numpy counterparts.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations are imported directly, so the DEEPUFM_DISABLE_NUMBA
flag does not matter here. Each row reports the best of N timings after a
warm-up call (which also triggers compilation).
"""

import argparse
import time

import numpy as np

from deepufm import _kernels
from deepufm.model import build_labels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    K, n, d, L = 3, 40, 60, 5
    h1 = rng.normal(0, d**-0.5, (d, K * n))
    ws = rng.normal(0, d**-0.5, (L - 1, d, d))
    w_last = rng.normal(0, d**-0.5, (K, d))
    y = build_labels(K, n)
    lam = np.full(L, 1e-2)
    for relu in (False, True):
        label = "relu" if relu else "linear"
        yield (
            f"loss_and_grads {label} K=3 n=40 d=60 L=5",
            lambda relu=relu: _kernels.loss_and_grads_numba(h1, ws, w_last, y, lam, 1e-2, relu),
            lambda relu=relu: _kernels.loss_and_grads_numpy(h1, ws, w_last, y, lam, 1e-2, relu),
        )
    tail = rng.standard_normal((K * n, K, d))
    w = rng.standard_normal((d, d))
    mask = rng.random((K * n, d)) > 0.5
    yield (
        "masked_tail 120 samples 3x60",
        lambda: _kernels.masked_tail_numba(tail, w, mask),
        lambda: _kernels.masked_tail_numpy(tail, w, mask),
    )
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((60, 60))
    yield ("kron 3x3 by 60x60", lambda: _kernels.kron_numba(a, b), lambda: _kernels.kron_numpy(a, b))
    for m in (32, 96):
        s = rng.standard_normal((m, m))
        s = s + s.T
        yield (
            f"jacobi eigensolver {m}x{m}",
            lambda s=s: _kernels.jacobi_eigh_numba(s),
            lambda s=s: _kernels.jacobi_eigh_numpy(s),
        )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        print("numba unavailable or disabled; both columns time the numpy path")
    rng = np.random.default_rng(0)
    print(f"{'kernel':44s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s}")
    for name, fast, slow in cases(rng):
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, args.repeat)
        print(f"{name:44s} {tf * 1e3:11.3f} {ts * 1e3:11.3f} {ts / tf:8.2f}")


if __name__ == "__main__":
    main()
