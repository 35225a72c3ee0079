"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is preferred; set ``CLOUDEYE_PURE_PYTHON=1`` to force the
fallback. Both backends take C-contiguous float64 / uint8 arrays and return
identical results (the float loops accumulate in the same order).
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("CLOUDEYE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def backends():
    """Return the available backend modules keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def region_distances(grid, desc, inv_var, y0, y1, x0, x1):
    """Diagonal-Mahalanobis distance of ``desc`` to every cell of ``grid[y0:y1, x0:x1]``."""
    return _impl.region_distances(
        np.ascontiguousarray(grid, dtype=np.float64),
        np.ascontiguousarray(desc, dtype=np.float64),
        np.ascontiguousarray(inv_var, dtype=np.float64),
        int(y0), int(y1), int(x0), int(x1),
    )


def adc_scan(codes, table):
    """Sum per-subspace lookup-table entries for every code row."""
    return _impl.adc_scan(
        np.ascontiguousarray(codes, dtype=np.uint8),
        np.ascontiguousarray(table, dtype=np.float64),
    )


def abs_diff_sum(a, b):
    """Sum of absolute differences between two flat uint8 buffers."""
    return int(_impl.abs_diff_sum(
        np.ascontiguousarray(a, dtype=np.uint8).reshape(-1),
        np.ascontiguousarray(b, dtype=np.uint8).reshape(-1),
    ))
