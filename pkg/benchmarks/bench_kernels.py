"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 200000] [--dim 16] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from lkgr._kernels import available_backends


def _inputs(rows, dim, c, rng):
    t = rng.normal(size=(rows, dim))
    t *= (rng.uniform(0, 2, size=rows) / np.linalg.norm(t, axis=1))[:, None]
    x = available_backends()["python"].expmap0_rows(t, c)
    s = rng.normal(size=(rows, dim))
    y = available_backends()["python"].expmap0_rows(s * 0.3, c)
    v = rng.normal(size=(rows, dim + 1)) * 0.3
    v += (available_backends()["python"].minkowski_rows(x, v) / c)[:, None] * x  # tangent at x
    return t, x, y, np.ascontiguousarray(v)


def _graph(n_nodes, avg_deg, rng):
    deg = rng.zipf(2.0, size=n_nodes).clip(1, 500)
    deg = (deg * avg_deg / deg.mean()).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    indices = rng.integers(0, n_nodes, size=indptr[-1]).astype(np.int64)
    return indptr, indices


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sample-size", type=int, default=8)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    c = 1.0
    t, x, y, v = _inputs(args.rows, args.dim, c, rng)
    indptr, indices = _graph(args.rows // 4, 6, rng)
    nodes = rng.integers(0, len(indptr) - 1, size=args.rows // 4).astype(np.int64)
    u = rng.random((len(nodes), args.sample_size))

    cases = {
        "minkowski_rows": lambda k: k.minkowski_rows(x, y),
        "expmap_rows": lambda k: k.expmap_rows(x, v, c),
        "logmap_rows": lambda k: k.logmap_rows(x, y, c),
        "expmap0_rows": lambda k: k.expmap0_rows(t, c),
        "logmap0_rows": lambda k: k.logmap0_rows(x, c),
        "dist_rows": lambda k: k.dist_rows(x, y, c),
        "sample_rows": lambda k: k.sample_rows(indptr, indices, nodes, u),
    }
    backends = available_backends()
    names = list(backends)
    print(f"rows={args.rows} dim={args.dim} backends={names}")
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>14}" for n in names) + (f"{'speedup':>10}" if len(names) > 1 else ""))
    for case, fn in cases.items():
        times = {}
        for n, mod in backends.items():
            fn(mod)  # warm up
            times[n] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        line = f"{case:<16}" + "".join(f"{times[n]:>14.2f}" for n in names)
        if "compiled" in times:
            line += f"{times['python'] / times['compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
