"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once before timing so numba compilation is excluded.
Outputs of the two paths are compared as a sanity check.
"""

import argparse
import timeit

import numpy as np

from bifrom import kernels
from bifrom.synthetic_fom import make_hopf_system


def cases(rng):
    system = make_hopf_system(D=50, seed=0)
    x0 = system.lift([0.7, 0.0]) + 0.01 * rng.standard_normal(50)
    A = np.linalg.qr(rng.standard_normal((40, 40)))[0]
    X = rng.standard_normal((2000, 40))
    C = rng.standard_normal((10, 40))
    P = rng.standard_normal((300, 40))
    return {
        "rk4_hopf (D=50, 20000 steps)": ("rk4_hopf", (system.V, 0.3, 2 * np.pi, 5.0, x0, 1e-3, 20000, 10)),
        "linear_rollout (40x40, 20000 steps)": ("linear_rollout", (A, rng.standard_normal(40), 20000)),
        "nearest_centroid (2000 pts, k=10)": ("nearest_centroid", (X, C)),
        "pairwise_distances (300 pts)": ("pairwise_distances", (P,)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speed-up':>9s} {'max |diff|':>11s}")
    for label, (name, argv) in cases(rng).items():
        f_np = getattr(kernels.numpy_kernels, name)
        f_nb = getattr(kernels.numba_kernels, name)
        out_np, out_nb = f_np(*argv), f_nb(*argv)
        diff = max(float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))
                   for a, b in zip(np.atleast_1d(out_np[0] if isinstance(out_np, tuple) else out_np),
                                   np.atleast_1d(out_nb[0] if isinstance(out_nb, tuple) else out_nb)))
        t_np = min(timeit.repeat(lambda: f_np(*argv), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*argv), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:40s} {t_np:12.2f} {t_nb:12.2f} {t_np / t_nb:8.1f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
