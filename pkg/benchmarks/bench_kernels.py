"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from regnav import _pykernels
from regnav.infomap import _FlowGraph, mutual_knn_graph
from regnav.sim import CELL, generate_house

try:
    from regnav import _ckernels
except ImportError:
    _ckernels = None


def _cases():
    house = generate_house(0, 4)
    grid = house.grid
    r, c = (int(v) for v in house.free_cells()[0])
    angles = np.linspace(0.0, 360.0, 8, endpoint=False)
    x, y = (c + 0.5) * CELL, (r + 0.5) * CELL

    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(loc=m, size=(150, 4)) for m in (0, 4, 8, 12)])
    D = np.linalg.norm(X[:, None] - X[None], axis=-1)
    W = mutual_knn_graph(D, 15)
    W = W / W.sum()
    g = _FlowGraph(W, np.asarray(W.sum(axis=1)).ravel())
    order = rng.permutation(g.n).astype(np.int64)

    def moves(impl):
        module = np.arange(g.n, dtype=np.int64)
        flow, exit_, size = g.module_stats(module)
        impl.move_nodes(g.indptr, g.indices, g.weights, g.flow, g.exit, module, order, flow, exit_, size, 20)

    return {
        "bfs_field (one house)": lambda impl: impl.bfs_field(grid, r, c),
        "cast_rays (8 rays)": lambda impl: impl.cast_rays(grid, x, y, angles, CELL, 4.0, 0.05),
        f"move_nodes ({g.n} nodes)": moves,
    }


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the pure-Python fallback only")
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in _cases().items():
        times = {}
        for b, impl in backends.items():
            n = 1
            while timeit.timeit(lambda: fn(impl), number=n) < 0.2:
                n *= 2
            times[b] = min(timeit.repeat(lambda: fn(impl), number=n, repeat=args.repeat)) / n
        row = f"{name:28s}" + "".join(f"{times[b] * 1e6:12.1f}us" for b in backends)
        if len(backends) == 2:
            row += f"   {times['python'] / times['cython']:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
