"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 7] [--json out.json]

Each case checks that both backends agree before timing them.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from dcelab import kernels


def _mf_case(n_users, n_items, dim, batch, seed=0):
    rng = np.random.default_rng(seed)
    U, V = rng.normal(size=(n_users, dim)), rng.normal(size=(n_items, dim))
    bu, bi = rng.normal(size=n_users), rng.normal(size=n_items)
    users = rng.integers(0, n_users, batch).astype(np.int64)
    items = rng.integers(0, n_items, batch).astype(np.int64)
    coef = rng.normal(size=batch)
    return users, items, U, V, bu, bi, coef


def _grad_call(impl, users, items, coef, U, V, bu, bi):
    gU, gV = np.zeros_like(U), np.zeros_like(V)
    gbu, gbi = np.zeros_like(bu), np.zeros_like(bi)
    g = impl.mf_scatter_grad(users, items, coef, U, V, gU, gV, gbu, gbi)
    return gU, gV, gbu, gbi, g


def cases():
    users, items, U, V, bu, bi, coef = _mf_case(500, 300, 16, 4096)
    yield "mf_logits b=4096 d=16", lambda impl: impl.mf_logits(users, items, U, V, bu, bi, 0.1)
    yield "mf_scatter_grad b=4096 d=16", lambda impl: _grad_call(impl, users, items, coef, U, V, bu, bi)
    rng = np.random.default_rng(1)
    for n in (10, 14):
        e, eh = rng.uniform(0, 2, n), rng.uniform(0, 2, n)
        p, ph = rng.uniform(0.05, 1, n), rng.uniform(0.05, 1, n)
        yield f"dr_enumerate n={n}", lambda impl, a=(e, eh, p, ph): impl.dr_enumerate(*a)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernels unavailable; build with `pip install -e .` (needs Cython)", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':<30}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, fn in cases():
        if not _same(fn(kernels.python), fn(kernels.compiled)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        t = {}
        for label, impl in (("python", kernels.python), ("cython", kernels.compiled)):
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(impl), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            t[label] = best * 1e3
        rows.append({"kernel": name, "python_ms": t["python"], "cython_ms": t["cython"],
                     "speedup": t["python"] / t["cython"]})
        print(f"{name:<30}{t['python']:>12.4f}{t['cython']:>13.4f}{rows[-1]['speedup']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
