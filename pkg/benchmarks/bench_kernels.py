"""Compare the compiled and numpy edge kernels, alone and inside a GGNN training step.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from bytetr import _core, ggnn
from bytetr._core import _pykernels
from bytetr.vsg import EncodedGraph

try:
    from bytetr._core import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_case(mod, n, d, e, width, rng):
    x = rng.normal(size=(n, d))
    src, dst = rng.integers(0, n, e), rng.integers(0, n, e)
    coef = np.ascontiguousarray(rng.normal(size=(e, width)))
    out = np.zeros((n, d))
    prods = np.empty((e, width))

    def run():
        mod.scatter_rows(out, x, src, dst, coef)
        mod.edge_products(x, x, src, dst, prods)
    return run


def train_case(backend, graphs, cfg, vocab_size):
    batch = ggnn.make_batch(graphs)
    params = ggnn.init_params(cfg, vocab_size)
    opt = ggnn.Adam()

    def run():
        _core.scatter_rows, _core.edge_products = backend.scatter_rows, backend.edge_products
        ggnn.train_step(params, cfg, batch, opt)
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the numpy fallback only")

    rows = []
    for n, d, e, width in [(200, 128, 400, 1), (2000, 128, 4000, 1), (2000, 128, 4000, 128),
                           (20000, 64, 40000, 1)]:
        for name, mod in backends.items():
            t = best_of(kernel_case(mod, n, d, e, width, np.random.default_rng(args.seed)), args.repeat)
            rows.append({"case": f"kernels N={n} D={d} E={e} w={width}", "backend": name, "seconds": t})

    cfg = ggnn.GgnnConfig()
    graphs = []
    for i in range(32):
        nn = int(rng.integers(20, 80))
        ne = 2 * nn
        graphs.append(EncodedGraph(rng.integers(0, 300, nn), rng.integers(0, nn, ne), rng.integers(0, nn, ne),
                                   rng.integers(0, 10, ne), np.zeros(1, dtype=np.int64), int(i % 59)))
    saved = _core.scatter_rows, _core.edge_products
    try:
        for name, mod in backends.items():
            t = best_of(train_case(mod, graphs, cfg, 300), args.repeat)
            rows.append({"case": "train_step batch=32 default config", "backend": name, "seconds": t})
    finally:
        _core.scatter_rows, _core.edge_products = saved

    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'backend':<8}{'ms':>10}{'speedup':>10}")
    base = {r["case"]: r["seconds"] for r in rows if r["backend"] == "numpy"}
    for r in rows:
        r["speedup_vs_numpy"] = base[r["case"]] / r["seconds"]
        print(f"{r['case']:<{width}}  {r['backend']:<8}{1000 * r['seconds']:>10.3f}{r['speedup_vs_numpy']:>9.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
