"""Time the numba and numpy oracle kernels on representative sizes.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Numba timings exclude the first (compiling) call.
"""

import argparse
import json
import time

import numpy as np

from coupling_gen.oracle import _kernels


def _cases(rng):
    p, q = rng.dirichlet(np.ones(4096)), rng.dirichlet(np.ones(4096))
    grid = np.linspace(0, 1, 401)
    pair = rng.dirichlet(np.ones(4))
    cond = rng.dirichlet(np.ones(2), size=(1600, 8))
    w = rng.dirichlet(np.ones(1600))
    qc, gc = rng.dirichlet(np.ones(4), size=(8, 64)), rng.dirichlet(np.ones(4), size=(8, 64))
    return {
        "tv[4096]": ("tv", (p, q)),
        "kl[4096]": ("kl", (p, q)),
        "product_law[T=12,V=2]": ("product_law", (rng.dirichlet(np.ones(2), size=12),)),
        "mixture_law[J=1600,T=8]": ("mixture_law", (w, cond)),
        "pair_grid_tv[401^2]": ("pair_grid_tv", (pair, grid)),
        "conditional_tv[8x64]": ("conditional_tv", (qc, gc)),
    }


def _time(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    impls = {"numpy": _kernels.NUMPY}
    if _kernels.NUMBA is not None:
        impls["numba"] = _kernels.NUMBA
    rows = []
    for name, (attr, inputs) in _cases(np.random.default_rng(args.seed)).items():
        row = {"case": name}
        for label, impl in impls.items():
            row[label] = _time(getattr(impl, attr), inputs, args.repeat)
        if "numba" in row:
            row["speedup"] = row["numpy"] / row["numba"]
        rows.append(row)
        line = " ".join(f"{k}={v * 1e6:9.1f}us" for k, v in row.items() if k in impls)
        print(f"{name:28s} {line}" + (f"  numpy/numba={row['speedup']:.2f}x" if "speedup" in row else ""))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
