"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tensor wraps a numpy array. Operations build a DAG: each non-leaf output
keeps a tuple of parent tensors and a closure that maps the output gradient
to per-parent gradient arrays. backward() walks the graph once in reverse
topological order, keeping gradients for interior nodes only transiently so
peak memory stays proportional to the live frontier, and accumulates into
the .grad buffer of leaf tensors that have requires_grad set.

Graph construction is skipped entirely when no input requires a gradient or
when inside no_grad(), so inference costs no graph memory.

All arrays are float64. Every operation validates shapes up front and, when
finite checks are enabled (the default), rejects non-finite outputs. Hot
training loops may disable the per-op check with finite_checks(False) and
verify their loss values instead.
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels as _kn
from .errors import ConfigurationError, ContractError, DimensionError, NumericError

_GRAD_ENABLED = True
_FINITE_CHECKS = True
_STAT_GROUPS = 1

# typed placeholders for unused compiled-kernel arguments
_DUMMY4 = np.zeros((1, 1, 1, 1))
_DUMMY3 = np.zeros((1, 1, 1))


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Leaf tensors are built directly and own a .grad buffer once backward()
    has deposited into them. Interior tensors are produced by operations and
    carry the graph edges needed for the reverse pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled):
    """Toggle the per-operation non-finite output check inside the block."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


@contextmanager
def stat_groups(groups):
    """Make batch_standardize compute statistics per batch chunk inside the block.

    With groups=g, a batch of G*g rows is treated as g contiguous chunks and
    each chunk gets its own per-channel statistics. This lets several
    independent sub-batches (one per view) share one stacked forward pass
    while keeping exactly the statistics they would see in separate passes.
    """
    global _STAT_GROUPS
    g = int(groups)
    if g < 1:
        raise ConfigurationError(f"stat_groups needs a positive group count, got {groups}")
    prev = _STAT_GROUPS
    _STAT_GROUPS = g
    try:
        yield
    finally:
        _STAT_GROUPS = prev


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _needs_grad(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _check_finite(data):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")


def _const(data):
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._prev = ()
    out._backward = None
    return out


def _node(data, prev, backward_fn):
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None
    out._prev = prev
    out._backward = backward_fn
    return out


def set_requires_grad(tensors, flag):
    """Set requires_grad on every tensor in the iterable."""
    for t in tensors:
        t.requires_grad = bool(flag)


def zero_grad(tensors):
    """Drop the gradient buffers of the given tensors."""
    for t in tensors:
        t.grad = None


def _toposort(root):
    order = []
    seen = set()
    work = [(root, False)]
    while work:
        node, expanded = work.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        work.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                work.append((p, False))
    return order


def backward(loss):
    """Run the reverse pass from a scalar loss.

    Gradients are accumulated (+=) into the .grad buffer of every reachable
    leaf with requires_grad; buffers of unreachable or frozen tensors are
    left untouched. Repeated calls accumulate; the caller resets with
    zero_grad between optimizer steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._prev, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            held = grads.get(key)
            # out-of-place: closures may hand the same array to two parents
            grads[key] = pg if held is None else held + pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if not _needs_grad(a, b):
        return _const(data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    if not _needs_grad(a, b):
        return _const(data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(data, (a, b), bw)


def neg(a):
    a = _as_tensor(a)
    data = -a.data
    if not _needs_grad(a):
        return _const(data)

    def bw(g):
        return (-g,)

    return _node(data, (a,), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    if not _needs_grad(a, b):
        return _const(data)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if na else None,
            _unbroadcast(g * ad, bd.shape) if nb else None,
        )

    return _node(data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    if not _needs_grad(a, b):
        return _const(data)
    bd, od = b.data, data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            _unbroadcast(g / bd, a.data.shape) if na else None,
            _unbroadcast(-g * od / bd, bd.shape) if nb else None,
        )

    return _node(data, (a, b), bw)


def pow_(a, exponent):
    a = _as_tensor(a)
    p = float(exponent)
    data = a.data ** p
    if not _needs_grad(a):
        return _const(data)
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _node(data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    if not _needs_grad(a):
        return _const(data)
    od = data

    def bw(g):
        return (g * od,)

    return _node(data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)
    if not _needs_grad(a):
        return _const(data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _node(data, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)
    if not _needs_grad(a):
        return _const(data)
    od = data

    def bw(g):
        return (g * 0.5 / od,)

    return _node(data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not _needs_grad(a):
        return _const(data)
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _node(data, (a,), bw)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return _const(data)
    shape = a.data.shape

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % len(shape) for i in ax)
            full = list(g.shape)
            for i in sorted(ax):
                full.insert(i, 1)
            gg = g.reshape(full)
        return (np.broadcast_to(gg, shape),)

    return _node(data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i % a.data.ndim] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    if not _needs_grad(a):
        return _const(data)
    orig = a.data.shape

    def bw(g):
        return (g.reshape(orig),)

    return _node(data, (a,), bw)


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    if not _needs_grad(a):
        return _const(data)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _node(data, (a,), bw)


def getitem(a, idx):
    """Basic (slice/int/tuple) indexing; advanced indexing is not supported."""
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data[idx])
    if not _needs_grad(a):
        return _const(data)
    src = a.data

    def bw(g):
        gz = np.zeros_like(src)
        gz[idx] = g
        return (gz,)

    return _node(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return _const(data)
    ax = axis % data.ndim
    sizes = [t.data.shape[ax] for t in tensors]

    def bw(g):
        out = []
        start = 0
        sl = [slice(None)] * g.ndim
        for s in sizes:
            sl[ax] = slice(start, start + s)
            out.append(g[tuple(sl)])
            start += s
        return tuple(out)

    return _node(data, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack requires at least one tensor")
    data = np.stack([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return _const(data)
    ax = axis % data.ndim

    def bw(g):
        gm = np.moveaxis(g, ax, 0)
        return tuple(gm[i] for i in range(len(tensors)))

    return _node(data, tuple(tensors), bw)


def add_n(tensors):
    """Sum of same-shape tensors as a single graph node."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("add_n requires at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"add_n shape mismatch: {shape} vs {t.data.shape}")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    if not _needs_grad(*tensors):
        return _const(data)
    n = len(tensors)

    def bw(g):
        return (g,) * n

    return _node(data, tuple(tensors), bw)


def weighted_sum(tensors, weights):
    """sum_k weights[k] * tensors[k] as one node.

    weights is a 1-D tensor with one entry per summand. Keeping the mixture
    as a single node instead of 2K elementwise nodes is what keeps the
    supernet graph (14 edges x 8 candidates per cell) inside memory budget.
    """
    tensors = [_as_tensor(t) for t in tensors]
    weights = _as_tensor(weights)
    if weights.data.ndim != 1 or weights.data.shape[0] != len(tensors):
        raise DimensionError(
            f"weights shape {weights.data.shape} does not match {len(tensors)} tensors"
        )
    if not tensors:
        raise DimensionError("weighted_sum requires at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"weighted_sum shape mismatch: {shape} vs {t.data.shape}")
    wd = weights.data
    data = wd[0] * tensors[0].data
    tmp = np.empty_like(data)
    for k in range(1, len(tensors)):
        np.multiply(tensors[k].data, wd[k], out=tmp)
        data += tmp
    if not _needs_grad(weights, *tensors):
        return _const(data)
    xs = [t.data for t in tensors]
    need_w = weights.requires_grad
    need_x = [t.requires_grad for t in tensors]

    def bw(g):
        gr = g.ravel()
        if need_w:
            gw = np.array([np.dot(gr, x.ravel()) for x in xs])
        else:
            gw = None
        return (gw,) + tuple(
            wd[k] * g if need_x[k] else None for k in range(len(xs))
        )

    return _node(data, (weights, *tensors), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    if not _needs_grad(a, b):
        return _const(data)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _node(data, (a, b), bw)


def linear(x, weight, bias=None):
    """x [B,D] @ weight.T [D,K] + bias [K]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(
            f"linear expects 2-D input and weight, got {x.data.shape}, {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear feature dims differ: input {x.data.shape}, weight {weight.data.shape}"
        )
    data = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError(
                f"bias shape {bias.data.shape} does not match {weight.data.shape[0]} outputs"
            )
        data = data + bias.data
        parents.append(bias)
    if not _needs_grad(*parents):
        return _const(data)
    xd, wd = x.data, weight.data
    nx, nw = x.requires_grad, weight.requires_grad
    nb = bias is not None and bias.requires_grad

    def bw(g):
        out = [
            g @ wd if nx else None,
            g.T @ xd if nw else None,
        ]
        if bias is not None:
            out.append(g.sum(axis=0) if nb else None)
        return tuple(out)

    return _node(data, tuple(parents), bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _pair(value, name, minimum):
    if isinstance(value, (int, np.integer)):
        pair = (int(value), int(value))
    else:
        try:
            a, b = value
        except (TypeError, ValueError):
            raise ConfigurationError(f"{name} must be an int or a pair, got {value!r}")
        pair = (int(a), int(b))
    if pair[0] < minimum or pair[1] < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {pair}")
    return pair


def _pad_hw(x, ph, pw, value=0.0):
    # faster than np.pad: one allocation plus one block copy
    if ph == 0 and pw == 0:
        return x
    B, C, H, W = x.shape
    if value == 0.0:
        out = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    else:
        out = np.full((B, C, H + 2 * ph, W + 2 * pw), value)
    out[:, :, ph : ph + H, pw : pw + W] = x
    return out


def conv2d(x, weight, stride=1, padding=0, dilation=1, groups=1):
    """2-D cross correlation.

    x: [B, Cin, H, W]; weight: [Cout, Cin/groups, kh, kw]. Zero padding is
    applied symmetrically before striding. Output spatial dims follow
    floor((H + 2p - d * (k - 1) - 1) / s) + 1 and must be >= 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    sh, sw = _pair(stride, "stride", 1)
    ph, pw = _pair(padding, "padding", 0)
    dh, dw = _pair(dilation, "dilation", 1)
    groups = int(groups)
    if groups < 1:
        raise ConfigurationError(f"groups must be >= 1, got {groups}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got {x.data.shape}, {weight.data.shape}"
        )
    B, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = weight.data.shape
    if Cin % groups != 0 or Cout % groups != 0:
        raise ConfigurationError(
            f"groups={groups} must divide both Cin={Cin} and Cout={Cout}"
        )
    if Cw != Cin // groups:
        raise DimensionError(
            f"weight expects {Cw * groups} input channels (groups={groups}), input has {Cin}"
        )
    eh = dh * (kh - 1) + 1
    ew = dw * (kw - 1) + 1
    Ho = (H + 2 * ph - eh) // sh + 1
    Wo = (W + 2 * pw - ew) // sw + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} (dilation {dh},{dw}) exceeds padded input {H + 2 * ph}x{W + 2 * pw}"
        )

    xd, wd = x.data, weight.data
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        return _conv_pointwise(x, weight, xd, wd, sh, sw, groups, B, Cin, Cout, Ho, Wo)
    if groups == Cin and groups == Cout:
        return _conv_depthwise(x, weight, xd, wd, sh, sw, ph, pw, dh, dw, B, Cin, Ho, Wo)
    return _conv_general(
        x, weight, xd, wd, sh, sw, ph, pw, dh, dw, groups, B, Cin, Cout, Ho, Wo
    )


def _conv_pointwise(x, weight, xd, wd, sh, sw, groups, B, Cin, Cout, Ho, Wo):
    xs = xd[:, :, ::sh, ::sw] if (sh > 1 or sw > 1) else xd
    xs = np.ascontiguousarray(xs).reshape(B, Cin, Ho * Wo)
    if groups == 1:
        w2 = wd.reshape(Cout, Cin)
        out = np.matmul(w2, xs).reshape(B, Cout, Ho, Wo)
    else:
        cig, cog = Cin // groups, Cout // groups
        xg = xs.reshape(B, groups, cig, Ho * Wo)
        wg = wd.reshape(groups, cog, cig)
        out = np.einsum("goc,bgcs->bgos", wg, xg).reshape(B, Cout, Ho, Wo)
    if not _needs_grad(x, weight):
        return _const(out)
    nx, nw = x.requires_grad, weight.requires_grad
    in_shape = xd.shape

    def bw(g):
        g3 = g.reshape(B, Cout, Ho * Wo)
        gx = gw = None
        if groups == 1:
            w2 = wd.reshape(Cout, Cin)
            if nx:
                gxs = np.matmul(w2.T, g3)
            if nw:
                gm = np.ascontiguousarray(g3.transpose(1, 0, 2)).reshape(Cout, -1)
                xm = np.ascontiguousarray(xs.transpose(1, 0, 2)).reshape(Cin, -1)
                gw = (gm @ xm.T).reshape(wd.shape)
        else:
            cig, cog = Cin // groups, Cout // groups
            gg = g3.reshape(B, groups, cog, Ho * Wo)
            xg = xs.reshape(B, groups, cig, Ho * Wo)
            wg = wd.reshape(groups, cog, cig)
            if nx:
                gxs = np.einsum("goc,bgos->bgcs", wg, gg).reshape(B, Cin, Ho * Wo)
            if nw:
                gw = np.einsum("bgos,bgcs->goc", gg, xg).reshape(wd.shape)
        if nx:
            if sh > 1 or sw > 1:
                gx = np.zeros(in_shape)
                gx[:, :, ::sh, ::sw] = gxs.reshape(B, Cin, Ho, Wo)
            else:
                gx = gxs.reshape(in_shape)
        return gx, gw

    return _node(out, (x, weight), bw)


def _conv_depthwise(x, weight, xd, wd, sh, sw, ph, pw, dh, dw, B, C, Ho, Wo):
    xp = _pad_hw(xd, ph, pw)
    out = np.zeros((B, C, Ho, Wo))
    if _kn.USE_JIT:
        _kn.depthwise_forward(xp, wd[:, 0], out, sh, sw, dh, dw)
    else:
        tmp = np.empty((B, C, Ho, Wo))
        for u in range(wd.shape[2]):
            hs = slice(u * dh, u * dh + sh * Ho, sh)
            for v in range(wd.shape[3]):
                ws = slice(v * dw, v * dw + sw * Wo, sw)
                np.multiply(xp[:, :, hs, ws], wd[:, 0, u, v].reshape(1, C, 1, 1), out=tmp)
                out += tmp
    if not _needs_grad(x, weight):
        return _const(out)
    nx, nw = x.requires_grad, weight.requires_grad
    kh, kw = wd.shape[2], wd.shape[3]

    def bw(g):
        # re-pad in backward instead of caching the padded input
        xpb = _pad_hw(xd, ph, pw) if nw else None
        gxp = np.zeros((B, C, xd.shape[2] + 2 * ph, xd.shape[3] + 2 * pw)) if nx else None
        gw = np.zeros_like(wd) if nw else None
        if _kn.USE_JIT:
            dummy = _DUMMY4
            _kn.depthwise_backward(
                np.ascontiguousarray(g),
                xpb if nw else dummy,
                wd[:, 0],
                gxp if nx else dummy,
                gw[:, 0] if nw else _DUMMY3,
                sh, sw, dh, dw, nx, nw,
            )
        else:
            buf = np.empty((B, C, Ho, Wo)) if nx else None
            for u in range(kh):
                hs = slice(u * dh, u * dh + sh * Ho, sh)
                for v in range(kw):
                    ws = slice(v * dw, v * dw + sw * Wo, sw)
                    if nw:
                        gw[:, 0, u, v] = np.einsum("bchw,bchw->c", g, xpb[:, :, hs, ws])
                    if nx:
                        np.multiply(g, wd[:, 0, u, v].reshape(1, C, 1, 1), out=buf)
                        gxp[:, :, hs, ws] += buf
        gx = None
        if nx:
            gx = gxp[:, :, ph : ph + xd.shape[2], pw : pw + xd.shape[3]] if (ph or pw) else gxp
        return gx, gw

    return _node(out, (x, weight), bw)


def _conv_general(x, weight, xd, wd, sh, sw, ph, pw, dh, dw, groups, B, Cin, Cout, Ho, Wo):
    from numpy.lib.stride_tricks import sliding_window_view

    eh = dh * (wd.shape[2] - 1) + 1
    ew = dw * (wd.shape[3] - 1) + 1
    xp = _pad_hw(xd, ph, pw)
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, ::sh, ::sw, ::dh, ::dw]
    cig, cog = Cin // groups, Cout // groups
    out = np.empty((B, Cout, Ho, Wo))
    for gi in range(groups):
        wg = wd[gi * cog : (gi + 1) * cog]
        vg = win[:, gi * cig : (gi + 1) * cig]
        # [B,cig,Ho,Wo,kh,kw] x [cog,cig,kh,kw] -> [B,Ho,Wo,cog]
        og = np.tensordot(vg, wg, axes=([1, 4, 5], [1, 2, 3]))
        out[:, gi * cog : (gi + 1) * cog] = og.transpose(0, 3, 1, 2)
    if not _needs_grad(x, weight):
        return _const(out)
    nx, nw = x.requires_grad, weight.requires_grad
    kh, kw = wd.shape[2], wd.shape[3]
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        gx = gw = None
        if nw:
            xpb = _pad_hw(xd, ph, pw)
            wb = sliding_window_view(xpb, (eh, ew), axis=(2, 3))[:, :, ::sh, ::sw, ::dh, ::dw]
            gw = np.empty_like(wd)
            for gi in range(groups):
                gg = g[:, gi * cog : (gi + 1) * cog]
                vg = wb[:, gi * cig : (gi + 1) * cig]
                # [B,cog,Ho,Wo] x [B,cig,Ho,Wo,kh,kw] -> [cog,cig,kh,kw]
                gw[gi * cog : (gi + 1) * cog] = np.tensordot(
                    gg, vg, axes=([0, 2, 3], [0, 2, 3])
                )
        if nx:
            gxp = np.zeros((B, Cin, Hp, Wp))
            for gi in range(groups):
                gg = g[:, gi * cog : (gi + 1) * cog].reshape(B, cog, Ho * Wo)
                for u in range(kh):
                    hs = slice(u * dh, u * dh + sh * Ho, sh)
                    for v in range(kw):
                        ws = slice(v * dw, v * dw + sw * Wo, sw)
                        wuv = wd[gi * cog : (gi + 1) * cog, :, u, v]
                        contrib = np.matmul(wuv.T, gg).reshape(B, cig, Ho, Wo)
                        gxp[:, gi * cig : (gi + 1) * cig, hs, ws] += contrib
            gx = gxp[:, :, ph : ph + xd.shape[2], pw : pw + xd.shape[3]] if (ph or pw) else gxp
        return gx, gw

    return _node(out, (x, weight), bw)


def pool2d(kind, x, kernel, stride=None, padding=0):
    """Average or max pooling over [B, C, H, W].

    Average pooling divides by the full kernel area, counting zero padding.
    Max pooling pads with -inf and, on ties, credits the gradient to the
    window element with the lowest linear index in the padded input.
    """
    if kind not in ("avg", "max"):
        raise ConfigurationError(f"pool kind must be 'avg' or 'max', got {kind!r}")
    x = _as_tensor(x)
    kh, kw = _pair(kernel, "kernel", 1)
    if stride is None:
        sh, sw = kh, kw
    else:
        sh, sw = _pair(stride, "stride", 1)
    ph, pw = _pair(padding, "padding", 0)
    if x.data.ndim != 4:
        raise DimensionError(f"pool2d expects 4-D input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"pool kernel {kh}x{kw} exceeds padded input {H + 2 * ph}x{W + 2 * pw}"
        )

    xd = x.data

    if _kn.USE_JIT:
        xc = np.ascontiguousarray(xd)
        out = np.empty((B, C, Ho, Wo))
        if kind == "avg":
            inv = 1.0 / (kh * kw)
            _kn.avgpool_forward(xc, out, kh, kw, sh, sw, ph, pw, inv)
            if not _needs_grad(x):
                return _const(out)

            def bw(g):
                gx = np.zeros((B, C, H, W))
                _kn.avgpool_backward(np.ascontiguousarray(g), gx, kh, kw, sh, sw, ph, pw, inv)
                return (gx,)

        else:
            _kn.maxpool_forward(xc, out, kh, kw, sh, sw, ph, pw)
            if not _needs_grad(x):
                return _const(out)

            def bw(g):
                gx = np.zeros((B, C, H, W))
                _kn.maxpool_backward(np.ascontiguousarray(g), xc, gx, kh, kw, sh, sw, ph, pw)
                return (gx,)

        return _node(out, (x,), bw)

    fill = 0.0 if kind == "avg" else -np.inf
    xp = _pad_hw(xd, ph, pw, value=fill)

    if kind == "avg":
        out = np.zeros((B, C, Ho, Wo))
        for u in range(kh):
            hs = slice(u, u + sh * Ho, sh)
            for v in range(kw):
                out += xp[:, :, hs, v : v + sw * Wo : sw]
        out *= 1.0 / (kh * kw)
        if not _needs_grad(x):
            return _const(out)

        def bw(g):
            gk = g * (1.0 / (kh * kw))
            gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
            for u in range(kh):
                hs = slice(u, u + sh * Ho, sh)
                for v in range(kw):
                    gxp[:, :, hs, v : v + sw * Wo : sw] += gk
            return (gxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else gxp,)

        return _node(out, (x,), bw)

    out = xp[:, :, 0 : sh * Ho : sh, 0 : sw * Wo : sw].copy()
    for u in range(kh):
        hs = slice(u, u + sh * Ho, sh)
        for v in range(kw):
            if u == 0 and v == 0:
                continue
            np.maximum(out, xp[:, :, hs, v : v + sw * Wo : sw], out=out)
    if not _needs_grad(x):
        return _const(out)

    def bw(g):
        # rediscover the argmax by comparing against the forward output;
        # scanning windows in linear order keeps the tie rule (lowest index)
        xpb = _pad_hw(xd, ph, pw, value=fill)
        gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
        taken = np.zeros((B, C, Ho, Wo), dtype=bool)
        for u in range(kh):
            hs = slice(u, u + sh * Ho, sh)
            for v in range(kw):
                ws = slice(v, v + sw * Wo, sw)
                hit = xpb[:, :, hs, ws] == out
                hit &= ~taken
                gxp[:, :, hs, ws] += g * hit
                taken |= hit
        return (gxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else gxp,)

    return _node(out, (x,), bw)


def global_avg_pool(x):
    """Mean over all axes after the second: [B, C, ...] -> [B, C]."""
    x = _as_tensor(x)
    if x.data.ndim < 3:
        raise DimensionError(f"global_avg_pool expects >= 3 dims, got {x.data.shape}")
    axes = tuple(range(2, x.data.ndim))
    data = x.data.mean(axis=axes)
    if not _needs_grad(x):
        return _const(data)
    shape = x.data.shape
    count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        gg = g.reshape(shape[:2] + (1,) * len(axes))
        return (np.broadcast_to(gg, shape) * (1.0 / count),)

    return _node(data, (x,), bw)


def global_max_pool(x):
    """Max over all axes after the second; ties credit the lowest flat index."""
    x = _as_tensor(x)
    if x.data.ndim < 3:
        raise DimensionError(f"global_max_pool expects >= 3 dims, got {x.data.shape}")
    shape = x.data.shape
    flat = x.data.reshape(shape[0], shape[1], -1)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if not _needs_grad(x):
        return _const(data)

    def bw(g):
        gz = np.zeros_like(flat)
        np.put_along_axis(gz, arg[..., None], g[..., None], axis=-1)
        return (gz.reshape(shape),)

    return _node(data, (x,), bw)


def batch_standardize(x, eps=1e-5, groups=None):
    """Per-channel standardization over batch and spatial axes.

    Uses the biased (population) variance of the current batch; there are no
    learned affine parameters and no running statistics. With groups > 1
    (explicit, or ambient via stat_groups) the batch axis is split into that
    many contiguous chunks and each chunk is standardized independently.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"batch_standardize expects 4-D input, got {x.data.shape}")
    G = _STAT_GROUPS if groups is None else int(groups)
    B, C, H, W = x.data.shape
    if G < 1 or B % G != 0:
        raise DimensionError(
            f"batch of {B} rows cannot be split into {G} statistics groups"
        )
    n = (B // G) * H * W
    if n < 2:
        raise NumericError(f"batch_standardize needs >= 2 values per channel, got {n}")
    axes = (1, 3, 4)
    xg = x.data.reshape(G, B // G, C, H, W)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    out = ((xg - mu) * istd).reshape(B, C, H, W)
    if not _needs_grad(x):
        return _const(out)
    xhat = out

    def bw(g):
        gg = g.reshape(G, B // G, C, H, W)
        xh = xhat.reshape(G, B // G, C, H, W)
        gm = gg.mean(axis=axes, keepdims=True)
        gxm = (gg * xh).mean(axis=axes, keepdims=True)
        return ((istd * (gg - gm - xh * gxm)).reshape(B, C, H, W),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# classifier and normalization heads
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    """Numerically stable softmax along one axis."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _needs_grad(x):
        return _const(out)
    od = out

    def bw(g):
        dot = (g * od).sum(axis=axis, keepdims=True)
        return (od * (g - dot),)

    return _node(out, (x,), bw)


def cross_entropy(logits, labels):
    """Mean negative log likelihood of integer labels under softmax(logits).

    Computed with the log-sum-exp trick; logits saturated by +-40 or more
    stay exact in float64.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.data.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"labels shape {y.shape} does not match batch {logits.data.shape[0]}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        raise DimensionError(f"labels must be integers, got dtype {y.dtype}")
    B, K = logits.data.shape
    if y.min() < 0 or y.max() >= K:
        raise IndexError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = ld[np.arange(B), y]
    data = np.asarray((lse - picked).mean())
    if not _needs_grad(logits):
        return _const(data)

    def bw(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(B), y] -= 1.0
        return (p * (float(g) / B),)

    return _node(data, (logits,), bw)


def l2_normalize(x, axis=1):
    """Scale rows (along axis) to unit Euclidean norm."""
    x = _as_tensor(x)
    nd = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(nd == 0.0):
        raise NumericError("l2_normalize received a zero vector")
    out = x.data / nd
    if not _needs_grad(x):
        return _const(out)
    od = out

    def bw(g):
        dot = (g * od).sum(axis=axis, keepdims=True)
        return ((g - od * dot) / nd,)

    return _node(out, (x,), bw)
