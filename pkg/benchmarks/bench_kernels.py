"""Time the compiled FPC inner loop against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--iters 4000] [--repeat 5]

The default problem is one lifted DOA snapshot at desk scale (32 x 180).
"""
import argparse
import timeit

import numpy as np

from deepfpc import _backend, _pykernels
from deepfpc.fpc import default_init
from deepfpc.sensing import generate_gaussian_matrix, quantize


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=32)
    ap.add_argument("--n", type=int, default=180)
    ap.add_argument("--iters", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    phi = generate_gaussian_matrix(args.m, args.n, rng)
    y = quantize(rng.standard_normal(args.m))
    x0 = default_init(phi, y)

    impls = {"python": _pykernels}
    try:
        from deepfpc import _kernels
        impls["cython"] = _kernels
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")

    results = {}
    for name, impl in impls.items():
        def run(impl=impl):
            _backend.fpc_iterations(phi, y, x0.copy(), 0.01, 0.01 / 1.1, args.iters, impl=impl)
        best = min(timeit.repeat(run, number=1, repeat=args.repeat))
        results[name] = best
        print(f"{name:>7}: {best * 1e3:8.2f} ms for {args.iters} iterations "
              f"({best / args.iters * 1e6:.2f} us/iter) on {args.m}x{args.n}")
    if len(results) == 2:
        print(f"speedup: {results['python'] / results['cython']:.1f}x")


if __name__ == "__main__":
    main()
