"""Time the numba kernels against their numpy twins.

Run ``python3 benchmarks/bench_kernels.py`` (add ``--repeat N`` for more
timings). Compilation happens in a warm-up call and is not counted.
"""

import argparse
import timeit

import numpy as np

from pig import _kernels as K


def cases(rng):
    x = rng.normal(size=20000).round(2)
    X = rng.normal(size=(4096, 3))
    sizes = np.array([3, 16, 16, 1])
    theta = rng.normal(size=K.policy_param_count(3, (16, 16)))
    v = rng.normal(size=200000)
    grp = rng.integers(0, 5, v.size)
    xs = np.sort(rng.normal(size=50000))
    ys = rng.normal(size=xs.size)
    return {
        "midrank": (K.midrank_numpy, K.midrank_numba, (x,)),
        "policy_forward": (K.policy_forward_numpy, K.policy_forward_numba, (X, theta, sizes, 1.0)),
        "group_moments": (K.group_moments_numpy, K.group_moments_numba, (v, grp, 5)),
        "best_split": (K.best_split_numpy, K.best_split_numba, (xs, ys, 5)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (f_np, f_nb, call_args) in cases(rng).items():
        f_nb(*call_args)
        t_np = min(timeit.repeat(lambda: f_np(*call_args), repeat=args.repeat, number=args.number)) / args.number
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), repeat=args.repeat, number=args.number)) / args.number
        print(f"{name:16s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
