"""Numba vs numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths are imported from ``evdrank._kernels`` directly, so the
``EVDRANK_DISABLE_NUMBA`` flag does not matter here.  Each kernel is called
once before timing so JIT compilation is excluded.  Results are also checked
for agreement.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from evdrank import _kernels


def _csr(rng, n_rows, n_cols, nnz_per_row):
    indptr = np.arange(0, n_rows * nnz_per_row + 1, nnz_per_row, dtype=np.int64)
    indices = rng.integers(0, n_cols, size=n_rows * nnz_per_row).astype(np.int64)
    values = rng.normal(size=n_rows * nnz_per_row)
    return indptr, indices, values


def cases(rng):
    logits = rng.normal(size=(256, 256)) * 5
    ip, ix, v = _csr(rng, 256, 4096, 40)
    rp, rx, rv = _csr(rng, 2000, 1 << 14, 60)
    theta = rng.normal(size=1 << 14)
    coeffs = rng.normal(size=2000)
    return {
        "contrastive_core 256x256": lambda k: k.contrastive_core(logits),
        "densify 256x4096": lambda k: k.densify(ip, ix, v, 4096),
        "csr_matvec 2000 rows": lambda k: k.csr_matvec(rp, rx, rv, theta),
        "csr_scatter 2000 rows": lambda k: _scatter(k, rp, rx, rv, coeffs),
    }


def _scatter(k, indptr, indices, values, coeffs):
    out = np.zeros(1 << 14)
    k.csr_scatter(out, indptr, indices, values, coeffs)
    return out


def _first_array(out):
    return out[2] if isinstance(out, tuple) else out


def timeit(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _kernels.NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for name, call in cases(np.random.default_rng(args.seed)).items():
        t_np = timeit(lambda: call(_kernels.NUMPY), args.repeat)
        t_nb = timeit(lambda: call(_kernels.NUMBA), args.repeat)
        a, b = _first_array(call(_kernels.NUMPY)), _first_array(call(_kernels.NUMBA))
        agree = np.allclose(a, b, rtol=1e-10, atol=1e-12)
        print(f"{name:<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
