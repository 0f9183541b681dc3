"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run on identical inputs with both backends; outputs are
checked for agreement before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from genimpute import kernels


def cases(rng):
    q = rng.integers(-2**40, 2**40, size=(20_000, 36), dtype=np.int64)
    seeds = rng.integers(0, 2**63, size=20_000, dtype=np.uint64)
    n_par = 50_000
    p, g = rng.normal(size=n_par), rng.normal(size=n_par)
    x = rng.normal(size=(256, 64))
    gamma, beta = rng.normal(size=64), rng.normal(size=64)

    def adam(b):
        pp, m, v = p.copy(), np.zeros(n_par), np.zeros(n_par)
        b.adam_update(pp, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)
        return pp

    def bn_fwd(b):
        return b.bn_forward_train(x, gamma, beta, 1e-5)[0]

    def bn_bwd(b):
        _, xhat, _, _, inv = kernels.python_backend.bn_forward_train(x, gamma, beta, 1e-5)
        dg, db = np.zeros(64), np.zeros(64)
        return b.bn_backward(x, xhat, gamma, inv, dg, db)

    return {
        "fnv1a_rows 20000x36": lambda b: b.fnv1a_rows(q, 7),
        "uniform_rows 20000x36": lambda b: b.uniform_rows(seeds, 36),
        "adam_update 50000": adam,
        "bn_forward_train 256x64": bn_fwd,
        "bn_backward 256x64": bn_bwd,
    }


def best_time(fn, repeat, number=3):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write timings to this file")
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not available; build it with `pip install -e . --no-build-isolation`")
        return 1
    py, cy = kernels.python_backend, kernels.compiled_backend
    rows = []
    print(f"{'kernel':28s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        a, b = fn(py), fn(cy)
        same = np.array_equal(a, b) if a.dtype.kind in "iu" else np.allclose(a, b, rtol=1e-10, atol=1e-12)
        if not same:
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        tp = best_time(lambda: fn(py), args.repeat)
        tc = best_time(lambda: fn(cy), args.repeat)
        rows.append({"kernel": name, "python_s": tp, "compiled_s": tc, "speedup": tp / tc})
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:12.3f} {tp / tc:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backend_default": kernels.BACKEND, "results": rows}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
