"""Independent oracles shared by the test suite.

Everything here is deliberately naive: explicit loops, no reuse of package
internals. Slow but obviously correct, so the fast implementations have an
authority to answer to.
"""

import numpy as np

from mvnas.autodiff import Tensor


def numerical_gradient(fn, params, h=1e-5):
    """Central finite differences of a scalar-producing closure.

    fn() must rebuild the forward pass from scratch on each call so that
    perturbed parameter data is picked up. Returns one gradient array per
    parameter, in order.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(fn().data)
            flat[i] = keep - h
            fm = float(fn().data)
            flat[i] = keep
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_rel_err(analytic, numeric):
    """Max elementwise error normalized by the larger of 1 and both scales."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(1.0, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn, params, tol=1e-6, h=1e-5):
    """Compare autodiff gradients of scalar fn() against finite differences."""
    from mvnas.autodiff import backward, zero_grad

    zero_grad(params)
    loss = fn()
    backward(loss)
    numeric = numerical_gradient(fn, params, h=h)
    worst = 0.0
    for p, num in zip(params, numeric):
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_rel_err(got, num))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol}"
    return worst


def naive_conv2d(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1):
    """Quintuple-loop cross correlation, one output element at a time."""
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    xp = np.zeros((B, Cin, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph : ph + H, pw : pw + W] = x
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    cig = Cin // groups
    cog = Cout // groups
    out = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for co in range(Cout):
            gi = co // cog
            for ho in range(Ho):
                for wo in range(Wo):
                    acc = 0.0
                    for ci in range(cig):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b, gi * cig + ci, ho * sh + u * dh, wo * sw + v * dw]
                                    * w[co, ci, u, v]
                                )
                    out[b, co, ho, wo] = acc
    return out


def naive_pool2d(kind, x, kernel, stride, padding):
    """Loop-based pooling. Average divides by the full kernel area."""
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    fill = 0.0 if kind == "avg" else -np.inf
    xp = np.full((B, C, H + 2 * ph, W + 2 * pw), fill)
    xp[:, :, ph : ph + H, pw : pw + W] = x
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for ho in range(Ho):
                for wo in range(Wo):
                    win = xp[b, c, ho * sh : ho * sh + kh, wo * sw : wo * sw + kw]
                    out[b, c, ho, wo] = win.sum() / (kh * kw) if kind == "avg" else win.max()
    return out


def naive_pool1d(kind, seq, kernel, padding):
    """1-D stride-1 pooling along a sequence, mirroring the fusion layout."""
    n = len(seq)
    fill = 0.0 if kind == "avg" else -np.inf
    xp = np.full(n + 2 * padding, fill)
    xp[padding : padding + n] = seq
    out = np.zeros(n + 2 * padding - kernel + 1)
    for i in range(out.size):
        win = xp[i : i + kernel]
        out[i] = win.sum() / kernel if kind == "avg" else win.max()
    return out


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)
