"""Time the compiled RBF kernel sums against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 100 500 1000] [--dim 64] [--repeat 5]
"""
import argparse
import importlib
import timeit

import numpy as np

from jscc.kernels import _rbf_py


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[100, 500, 1000])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    try:
        compiled = importlib.import_module("jscc.kernels._rbf")
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'n':>6} {'kernel':>18} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n in args.sizes:
        a, b = rng.random((n, args.dim)), rng.random((n, args.dim))
        cases = {
            "rbf_sum": lambda m: m.rbf_sum(a, b, 0.1, True),
            "pairwise_sq_dists": lambda m: m.pairwise_sq_dists(a),
        }
        for name, fn in cases.items():
            t_py = min(timeit.repeat(lambda: fn(_rbf_py), number=1, repeat=args.repeat)) * 1e3
            if compiled is None:
                print(f"{n:>6} {name:>18} {t_py:>10.2f} {'-':>10} {'-':>8}")
                continue
            assert np.allclose(fn(compiled), fn(_rbf_py), rtol=1e-10)
            t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
            print(f"{n:>6} {name:>18} {t_py:>10.2f} {t_c:>10.2f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
