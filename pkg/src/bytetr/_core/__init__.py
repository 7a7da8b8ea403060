"""Edge kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``BYTETR_PURE_PYTHON``
is unset; :data:`BACKEND` names the active implementation.
"""

import os

from . import _pykernels

if os.environ.get("BYTETR_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

scatter_rows = _impl.scatter_rows
edge_products = _impl.edge_products

__all__ = ["BACKEND", "scatter_rows", "edge_products", "_pykernels"]
