"""Sampling kernel dispatch: compiled core when available, numpy otherwise.

The compiled extension (crossview._native, built from _native.pyx) covers the
single hot inner loop of the toolkit: gathering bilinear samples of a C,H,W
feature map at many continuous pixel positions, which dominates the runtime
of feature-volume lifting. The numpy fallback implements the exact same
arithmetic in the exact same evaluation order, so results are bit-identical
across backends (asserted in the test suite) and everything works on
installs without a C compiler.

Set CROSSVIEW_NO_NATIVE=1 to force the numpy path (used by the benchmark).
"""

import os

import numpy as np

if os.environ.get("CROSSVIEW_NO_NATIVE"):
    _native = None
else:
    try:
        from crossview import _native
    except ImportError:
        _native = None

USING_NATIVE = _native is not None


def backend_name():
    return "native" if USING_NATIVE else "numpy"


def bilinear_gather_numpy(fmap, u, v):
    """Pure-numpy reference for bilinear_gather (same float op order)."""
    C, H, W = fmap.shape
    cu = np.clip(u, 0.0, W - 1.0)
    cv = np.clip(v, 0.0, H - 1.0)
    x0 = np.floor(cu).astype(np.intp)
    y0 = np.floor(cv).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fu = (cu - x0)[:, None]
    fv = (cv - y0)[:, None]
    m = fmap.reshape(C, -1)
    v00 = m[:, y0 * W + x0].T
    v01 = m[:, y0 * W + x1].T
    v10 = m[:, y1 * W + x0].T
    v11 = m[:, y1 * W + x1].T
    top = (1.0 - fu) * v00 + fu * v01
    bot = (1.0 - fu) * v10 + fu * v11
    return (1.0 - fv) * top + fv * bot


def bilinear_gather(fmap, u, v):
    """Sample fmap (C,H,W) at positions (u[i], v[i]); returns (N, C).

    Coordinates are edge-clamped; exact at integer grid points.
    """
    fmap = np.ascontiguousarray(fmap, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"fmap must be (C,H,W), got shape {fmap.shape}")
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("u and v must be equal-length 1-D arrays")
    if _native is not None:
        return _native.bilinear_gather(fmap, u, v)
    return bilinear_gather_numpy(fmap, u, v)
