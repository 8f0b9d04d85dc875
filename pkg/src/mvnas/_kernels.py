"""JIT-compiled inner loops for the hottest numeric kernels.

Depthwise convolution and 2-D pooling dominate the supernet step cost; their
tap loops are compiled with numba when it is available. Every kernel here has
a vectorized numpy twin inside autodiff, selected by the USE_JIT flag, so the
engine stays fully functional (just slower) without a compiler. Results agree
with the numpy paths to floating-point roundoff.
"""

import numpy as np

try:
    from numba import njit

    HAVE_JIT = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_JIT = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


USE_JIT = HAVE_JIT


@njit(cache=True, fastmath=True)
def depthwise_forward(xp, w, out, sh, sw, dh, dw):
    """out[b,c,i,j] = sum_uv xp[b,c,i*sh+u*dh, j*sw+v*dw] * w[c,u,v]."""
    B, C, Ho, Wo = out.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                orow = out[b, c, i]
                for j in range(Wo):
                    orow[j] = 0.0
                for u in range(kh):
                    xrow = xp[b, c, i * sh + u * dh]
                    for v in range(kw):
                        wv = w[c, u, v]
                        off = v * dw
                        for j in range(Wo):
                            orow[j] += xrow[off + j * sw] * wv


@njit(cache=True, fastmath=True)
def depthwise_backward(g, xp, w, gxp, gw, sh, sw, dh, dw, need_x, need_w):
    """Scatter dL/dxp and accumulate dL/dw for depthwise_forward."""
    B, C, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                grow = g[b, c, i]
                for u in range(kh):
                    hi = i * sh + u * dh
                    for v in range(kw):
                        off = v * dw
                        if need_x and need_w:
                            wv = w[c, u, v]
                            xrow = xp[b, c, hi]
                            gxrow = gxp[b, c, hi]
                            acc = 0.0
                            for j in range(Wo):
                                gj = grow[j]
                                gxrow[off + j * sw] += gj * wv
                                acc += gj * xrow[off + j * sw]
                            gw[c, u, v] += acc
                        elif need_x:
                            wv = w[c, u, v]
                            gxrow = gxp[b, c, hi]
                            for j in range(Wo):
                                gxrow[off + j * sw] += grow[j] * wv
                        else:
                            xrow = xp[b, c, hi]
                            acc = 0.0
                            for j in range(Wo):
                                acc += grow[j] * xrow[off + j * sw]
                            gw[c, u, v] += acc


@njit(cache=True)
def maxpool_forward(x, out, kh, kw, sh, sw, ph, pw):
    """Max over each window; padding positions never win (as if -inf)."""
    B, C, H, W = x.shape
    Ho, Wo = out.shape[2], out.shape[3]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -np.inf
                    for u in range(kh):
                        hi = i * sh + u - ph
                        if hi < 0 or hi >= H:
                            continue
                        for v in range(kw):
                            wi = j * sw + v - pw
                            if wi < 0 or wi >= W:
                                continue
                            val = x[b, c, hi, wi]
                            if val > best:
                                best = val
                    out[b, c, i, j] = best


@njit(cache=True)
def maxpool_backward(g, x, gx, kh, kw, sh, sw, ph, pw):
    """Re-finds each window's first maximum (lowest linear index on ties)."""
    B, C, H, W = x.shape
    Ho, Wo = g.shape[2], g.shape[3]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -np.inf
                    bi = -1
                    bj = -1
                    for u in range(kh):
                        hi = i * sh + u - ph
                        if hi < 0 or hi >= H:
                            continue
                        for v in range(kw):
                            wi = j * sw + v - pw
                            if wi < 0 or wi >= W:
                                continue
                            val = x[b, c, hi, wi]
                            if val > best:
                                best = val
                                bi = hi
                                bj = wi
                    if bi >= 0:
                        gx[b, c, bi, bj] += g[b, c, i, j]


@njit(cache=True, fastmath=True)
def avgpool_forward(x, out, kh, kw, sh, sw, ph, pw, inv_area):
    """Window sum times 1/(kh*kw); zero padding counts toward the area."""
    B, C, H, W = x.shape
    Ho, Wo = out.shape[2], out.shape[3]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for u in range(kh):
                        hi = i * sh + u - ph
                        if hi < 0 or hi >= H:
                            continue
                        for v in range(kw):
                            wi = j * sw + v - pw
                            if wi < 0 or wi >= W:
                                continue
                            acc += x[b, c, hi, wi]
                    out[b, c, i, j] = acc * inv_area


@njit(cache=True, fastmath=True)
def avgpool_backward(g, gx, kh, kw, sh, sw, ph, pw, inv_area):
    B, C, H, W = gx.shape
    Ho, Wo = g.shape[2], g.shape[3]
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    gv = g[b, c, i, j] * inv_area
                    for u in range(kh):
                        hi = i * sh + u - ph
                        if hi < 0 or hi >= H:
                            continue
                        for v in range(kw):
                            wi = j * sw + v - pw
                            if wi < 0 or wi >= W:
                                continue
                            gx[b, c, hi, wi] += gv
