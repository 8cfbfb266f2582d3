"""Pure-numpy fallback for the hot pooling kernels.

Accumulates kernel taps in a fixed order so results are bit-identical to
the compiled extension.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _out_extents(xp_shape, kernel, stride):
    t, h, w, _ = xp_shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    return (t - kt) // st + 1, (h - kh) // sh + 1, (w - kw) // sw + 1


def depthwise_conv3d_fwd(x, weight, bias, stride, pad):
    """x: [T, H, W, C]; weight: [kt, kh, kw, C]; bias: [C] -> [To, Ho, Wo, C]."""
    xp = np.pad(x, list(pad) + [(0, 0)])
    kt, kh, kw, c = weight.shape
    st, sh, sw = stride
    to, ho, wo = _out_extents(xp.shape, (kt, kh, kw), stride)
    y = np.zeros((to, ho, wo, c), dtype=x.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                y += (
                    xp[i : i + to * st : st, j : j + ho * sh : sh, k : k + wo * sw : sw]
                    * weight[i, j, k]
                )
    y += bias
    return y


def depthwise_conv3d_bwd(gy, x, weight, stride, pad, need_input_grad=True):
    xp = np.pad(x, list(pad) + [(0, 0)])
    kt, kh, kw, c = weight.shape
    st, sh, sw = stride
    to, ho, wo, _ = gy.shape
    gw = np.zeros_like(weight)
    gxp = np.zeros_like(xp) if need_input_grad else None
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                sl = (
                    slice(i, i + to * st, st),
                    slice(j, j + ho * sh, sh),
                    slice(k, k + wo * sw, sw),
                )
                gw[i, j, k] = (xp[sl] * gy).sum(axis=(0, 1, 2))
                if need_input_grad:
                    gxp[sl] += gy * weight[i, j, k]
    gb = gy.sum(axis=(0, 1, 2))
    gx = None
    if need_input_grad:
        (pt0, pt1), (ph0, ph1), (pw0, pw1) = pad
        t, h, w, _ = x.shape
        gx = gxp[pt0 : pt0 + t, ph0 : ph0 + h, pw0 : pw0 + w]
    return gx, gw, gb
