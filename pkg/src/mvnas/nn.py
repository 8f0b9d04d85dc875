"""Layers and modules on top of the autodiff engine.

Modules register parameters by attribute assignment; named_params walks
attributes in insertion order, so parameter ordering is deterministic for a
given construction sequence. Layers also know their own output shape and
multiply-accumulate count for a per-sample input shape (C, H, W); the cost
model walks the very same objects the forward pass runs, so the two cannot
drift apart.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


class Module:
    """Base class: parameter discovery plus a forward() call protocol."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_params(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(val, Tensor):
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}.{i}"))
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}.{k}"))
        return out

    def params(self):
        return [t for _, t in self.named_params()]

    def param_count(self):
        return int(sum(t.data.size for t in self.params()))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def macs(self, shape):
        total = 0
        for layer in self.layers:
            total += layer.macs(shape)
            shape = layer.out_shape(shape)
        return total


class Identity(Module):
    def forward(self, x):
        return x

    def out_shape(self, shape):
        return shape

    def macs(self, shape):
        return 0


class ReLU(Module):
    def forward(self, x):
        return ad.relu(x)

    def out_shape(self, shape):
        return shape

    def macs(self, shape):
        return 0


class Standardize(Module):
    def __init__(self, eps=1e-5):
        self.eps = eps

    def forward(self, x):
        return ad.batch_standardize(x, eps=self.eps)

    def out_shape(self, shape):
        return shape

    def macs(self, shape):
        return 0


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _conv_out_hw(h, w, kernel, stride, padding, dilation):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return ho, wo


class Conv2d(Module):
    """Convolution without bias; weights drawn He-normal from the given rng."""

    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1):
        self.cin = cin
        self.cout = cout
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.dilation = _pair(dilation)
        self.groups = groups
        fan_in = (cin // groups) * self.kernel[0] * self.kernel[1]
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(cout, cin // groups, *self.kernel))
        self.weight = Tensor(w, requires_grad=True)

    def forward(self, x):
        return ad.conv2d(
            x, self.weight,
            stride=self.stride, padding=self.padding,
            dilation=self.dilation, groups=self.groups,
        )

    def out_shape(self, shape):
        c, h, w = shape
        ho, wo = _conv_out_hw(h, w, self.kernel, self.stride, self.padding, self.dilation)
        return (self.cout, ho, wo)

    def macs(self, shape):
        c, h, w = shape
        ho, wo = _conv_out_hw(h, w, self.kernel, self.stride, self.padding, self.dilation)
        return self.cout * ho * wo * (self.cin // self.groups) * self.kernel[0] * self.kernel[1]


class Pool2d(Module):
    def __init__(self, kind, kernel, stride=1, padding=0):
        self.kind = kind
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def forward(self, x):
        return ad.pool2d(self.kind, x, self.kernel, stride=self.stride, padding=self.padding)

    def out_shape(self, shape):
        c, h, w = shape
        ho, wo = _conv_out_hw(h, w, self.kernel, self.stride, self.padding, (1, 1))
        return (c, ho, wo)

    def macs(self, shape):
        return 0


class Linear(Module):
    def __init__(self, rng, din, dout, bias=True):
        self.din = din
        self.dout = dout
        std = 1.0 / np.sqrt(din)
        self.weight = Tensor(rng.normal(0.0, std, size=(dout, din)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)

    def out_shape(self, shape):
        return (self.dout,)

    def macs(self, shape):
        return self.dout * self.din


class FactorizedReduce(Module):
    """Halve spatial dims and retarget channels with two offset 1x1 convs.

    The second path is shifted by one pixel so the pair together sees every
    input position. Requires even spatial dims.
    """

    def __init__(self, rng, cin, cout):
        self.cin = cin
        self.cout = cout
        ca = cout - cout // 2
        self.act = ReLU()
        self.conv_a = Conv2d(rng, cin, ca, 1, stride=2)
        self.conv_b = Conv2d(rng, cin, cout // 2, 1, stride=2)
        self.norm = Standardize()

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % 2 or w % 2 or h < 2 or w < 2:
            raise DimensionError(f"factorized reduce needs even spatial dims, got {h}x{w}")
        r = self.act(x)
        a = self.conv_a(r)
        b = self.conv_b(r[:, :, 1:, 1:])
        return self.norm(ad.concat([a, b], axis=1))

    def out_shape(self, shape):
        c, h, w = shape
        return (self.cout, h // 2, w // 2)

    def macs(self, shape):
        c, h, w = shape
        ho, wo = h // 2, w // 2
        return (self.cout - self.cout // 2) * self.cin * ho * wo + (self.cout // 2) * self.cin * ho * wo
