"""Hot-loop kernels, compiled when available.

The Cython extension ``rvdiff._kernels`` is used when it imports and the
environment variable ``RVDIFF_PURE_PYTHON`` is unset; otherwise the numpy
versions in ``rvdiff._fallback`` are used. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from rvdiff import _fallback

_compiled = None
if not os.environ.get("RVDIFF_PURE_PYTHON"):
    try:
        from rvdiff import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def backends():
    """Map of available backend name -> module, for parity tests and benchmarks."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


_impl = _compiled if _compiled is not None else _fallback


def scatter_nearest(pix, depth, npix):
    """For each of ``npix`` pixels, the index of the nearest point in it or -1."""
    pix = np.ascontiguousarray(pix, dtype=np.int64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    return _impl.scatter_nearest(pix, depth, int(npix))


def bev_counts(x, y, labels, bounds, bins, num_classes):
    x_min, x_max, y_min, y_max = (float(v) for v in bounds)
    return _impl.bev_counts(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64),
        x_min, x_max, y_min, y_max, int(bins), int(num_classes),
    )


def poly3_kernel_sum(a, b, scale):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return float(_impl.poly3_kernel_sum(a, b, float(scale)))


def raycast(dirs, ground_z, lo, hi, max_range):
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    lo = np.ascontiguousarray(lo, dtype=np.float64).reshape(-1, 3)
    hi = np.ascontiguousarray(hi, dtype=np.float64).reshape(-1, 3)
    return _impl.raycast(dirs, float(ground_z), lo, hi, float(max_range))
