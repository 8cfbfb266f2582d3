# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled depthwise 3-D pooling kernels.

Same tap accumulation order as the pure-numpy fallback so both backends
produce bit-identical results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def depthwise_conv3d_fwd(x, weight, bias, stride, pad):
    xp = np.ascontiguousarray(np.pad(x, list(pad) + [(0, 0)]))
    w = np.ascontiguousarray(weight)
    b = np.ascontiguousarray(bias)
    return _fwd(xp, w, b, stride[0], stride[1], stride[2])


def _fwd(
    double[:, :, :, ::1] xp,
    double[:, :, :, ::1] w,
    double[::1] b,
    int st,
    int sh,
    int sw,
):
    cdef Py_ssize_t kt = w.shape[0], kh = w.shape[1], kw = w.shape[2], c = w.shape[3]
    cdef Py_ssize_t to = (xp.shape[0] - kt) // st + 1
    cdef Py_ssize_t ho = (xp.shape[1] - kh) // sh + 1
    cdef Py_ssize_t wo = (xp.shape[2] - kw) // sw + 1
    out = np.zeros((to, ho, wo, c), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t i, j, k, ot, oh, ow, ch
    cdef double wv
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                for ot in range(to):
                    for oh in range(ho):
                        for ow in range(wo):
                            for ch in range(c):
                                y[ot, oh, ow, ch] += (
                                    xp[ot * st + i, oh * sh + j, ow * sw + k, ch]
                                    * w[i, j, k, ch]
                                )
    for ot in range(to):
        for oh in range(ho):
            for ow in range(wo):
                for ch in range(c):
                    y[ot, oh, ow, ch] += b[ch]
    return out


def depthwise_conv3d_bwd(gy, x, weight, stride, pad, need_input_grad=True):
    xp = np.ascontiguousarray(np.pad(x, list(pad) + [(0, 0)]))
    gyc = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(weight)
    gxp, gw, gb = _bwd(gyc, xp, w, stride[0], stride[1], stride[2],
                       1 if need_input_grad else 0)
    gx = None
    if need_input_grad:
        (pt0, _), (ph0, _), (pw0, _) = pad
        t, h, ww, _ = x.shape
        gx = np.asarray(gxp)[pt0:pt0 + t, ph0:ph0 + h, pw0:pw0 + ww]
    return gx, gw, gb


def _bwd(
    double[:, :, :, ::1] gy,
    double[:, :, :, ::1] xp,
    double[:, :, :, ::1] w,
    int st,
    int sh,
    int sw,
    int need_x,
):
    cdef Py_ssize_t kt = w.shape[0], kh = w.shape[1], kw = w.shape[2], c = w.shape[3]
    cdef Py_ssize_t to = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    gw_arr = np.zeros((kt, kh, kw, c), dtype=np.float64)
    gb_arr = np.zeros(c, dtype=np.float64)
    gxp_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], c), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t i, j, k, ot, oh, ow, ch
    cdef double g
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                for ot in range(to):
                    for oh in range(ho):
                        for ow in range(wo):
                            for ch in range(c):
                                g = gy[ot, oh, ow, ch]
                                gw[i, j, k, ch] += (
                                    xp[ot * st + i, oh * sh + j, ow * sw + k, ch] * g
                                )
                                if need_x:
                                    gxp[ot * st + i, oh * sh + j, ow * sw + k, ch] += (
                                        g * w[i, j, k, ch]
                                    )
    for ot in range(to):
        for oh in range(ho):
            for ow in range(wo):
                for ch in range(c):
                    gb[ch] += gy[ot, oh, ow, ch]
    return gxp_arr, gw_arr, gb_arr
