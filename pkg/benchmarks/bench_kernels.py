"""Compare the numba kernels against the pure-numpy fallbacks.

Run as `python benchmarks/bench_kernels.py [--n 64] [--repeats 50]`.
Times the hot geometry/valency kernels on random inputs of a given size
under both backends and prints a table with speedups. Also cross-checks
that both backends agree, since a fast wrong kernel is worse than none.
"""

import argparse
import time

import numpy as np

from moldiff import kernels


def _timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(n, nf, rng):
    pos = rng.standard_normal((n, 3)) * 3.0
    dist = kernels.pairwise_dist_fwd(pos)
    g_dist = rng.standard_normal((n, n))
    g_ang = rng.standard_normal((n, n, n))
    centers = np.linspace(0.0, 12.0, 32)
    widths = np.full(32, centers[1] - centers[0])
    g_rbf = rng.standard_normal((n, n, 32))
    p = rng.random((n, nf))
    p /= p.sum(axis=1, keepdims=True)
    p_pair = np.einsum("ia,jb->ijab", p, p)
    w = rng.integers(0, 4, size=(n, n, nf, nf)).astype(np.float64)
    margins = rng.standard_normal((n, n, nf, nf, 3))
    return {
        "pairwise_dist_fwd": lambda: kernels.pairwise_dist_fwd(pos),
        "pairwise_dist_bwd": lambda: kernels.pairwise_dist_bwd(pos, dist, g_dist),
        "angles_fwd": lambda: kernels.angles_fwd(pos),
        "angles_bwd": lambda: kernels.angles_bwd(pos, g_ang),
        "rbf_fwd": lambda: kernels.rbf_fwd(dist.ravel(), centers, widths),
        "rbf_bwd": lambda: kernels.rbf_bwd(
            dist.reshape(-1), centers, widths, g_rbf.reshape(-1, 32)
        ),
        "decide_bonds": lambda: kernels.decide_bonds_kernel(margins, kernels.RULE_HIGHEST),
        "valency_sum": lambda: kernels.valency_sum(p_pair, w),
        "triplet_mask": lambda: kernels.triplet_mask(dist),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=64, help="number of atoms")
    ap.add_argument("--nf", type=int, default=5, help="number of atom types")
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(args.n, args.nf, rng)
    rows = []
    reference = {}
    for backend in ("numpy", "numba"):
        try:
            kernels.set_backend(backend)
        except RuntimeError as e:
            print(f"skipping {backend}: {e}")
            continue
        for name, fn in cases.items():
            out = fn()  # warm up (JIT compile) and keep for cross-check
            if backend == "numpy":
                reference[name] = out
            else:
                ref = reference.get(name)
                if ref is not None:
                    # summation order differs between backends, so demand
                    # agreement only to well below any physical tolerance
                    for a, b in zip(np.atleast_1d(out), np.atleast_1d(ref)):
                        aa, bb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
                        if not np.allclose(aa, bb, rtol=1e-9, atol=1e-9):
                            raise AssertionError(f"{name}: backends disagree")
            rows.append((name, backend, _timeit(fn, args.repeats)))

    by_name = {}
    for name, backend, t in rows:
        by_name.setdefault(name, {})[backend] = t
    print(f"\nn={args.n} atoms, nf={args.nf} types, best of {args.repeats}")
    print(f"{'kernel':<22} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, times in by_name.items():
        tn = times.get("numpy")
        tb = times.get("numba")
        s = f"{tn / tb:8.1f}x" if tn and tb else "      n/a"
        fmt = lambda t: f"{t * 1e3:9.3f} ms" if t else "      n/a"
        print(f"{name:<22} {fmt(tn)} {fmt(tb)} {s}")


if __name__ == "__main__":
    main()
