# Compiled sampling kernels. Semantics (including the exact floating-point
# evaluation order) must stay identical to the numpy fallbacks in
# crossview.kernels so both backends are bit-interchangeable.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def bilinear_gather(double[:, :, ::1] fmap, double[::1] u, double[::1] v):
    """Sample a C,H,W map at N continuous pixel positions (edge-clamped).

    Returns an (N, C) float64 array. Coordinates are clamped to
    [0, W-1] x [0, H-1] before the four-neighbor interpolation, so every
    query is defined.
    """
    cdef Py_ssize_t C = fmap.shape[0]
    cdef Py_ssize_t H = fmap.shape[1]
    cdef Py_ssize_t W = fmap.shape[2]
    cdef Py_ssize_t N = u.shape[0]

    out_arr = np.empty((N, C), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t n, c, x0, x1, y0, y1
    cdef double cu, cv, fu, fv, top, bot
    cdef double wmax = W - 1.0
    cdef double hmax = H - 1.0

    for n in range(N):
        cu = u[n]
        if cu < 0.0:
            cu = 0.0
        elif cu > wmax:
            cu = wmax
        cv = v[n]
        if cv < 0.0:
            cv = 0.0
        elif cv > hmax:
            cv = hmax
        x0 = <Py_ssize_t>cu
        y0 = <Py_ssize_t>cv
        x1 = x0 + 1
        if x1 > W - 1:
            x1 = W - 1
        y1 = y0 + 1
        if y1 > H - 1:
            y1 = H - 1
        fu = cu - <double>x0
        fv = cv - <double>y0
        for c in range(C):
            top = (1.0 - fu) * fmap[c, y0, x0] + fu * fmap[c, y0, x1]
            bot = (1.0 - fu) * fmap[c, y1, x0] + fu * fmap[c, y1, x1]
            out[n, c] = (1.0 - fv) * top + fv * bot
    return out_arr
