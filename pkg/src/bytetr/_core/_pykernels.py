"""Pure numpy implementations of the edge kernels (fallback backend)."""

import numpy as np


def scatter_rows(out, x, src, dst, coef):
    """out[dst[e]] += coef[e] * x[src[e]] for every edge e, in order."""
    np.add.at(out, dst, coef * x[src])


def edge_products(a, b, ia, ib, out):
    """out[e] = a[ia[e]] . b[ib[e]] (out [E, 1]) or elementwise product (out [E, D])."""
    prod = a[ia] * b[ib]
    if out.shape[1] == 1:
        # sequential sum keeps results identical to the compiled loop
        acc = np.zeros(len(ia))
        for k in range(prod.shape[1]):
            acc = acc + prod[:, k]
        out[:, 0] = acc
    else:
        out[...] = prod
