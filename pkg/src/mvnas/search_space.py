"""Candidate operations, cell topology, and the continuous relaxation.

A cell is a 7-node DAG: nodes 0 and 1 are inputs, nodes 2..5 are computed,
node 6 concatenates nodes 2..5 along channels. Every computed node receives
one edge from each earlier node, giving 14 edges, each carrying all 8
candidate operations blended by a softmax over that edge's architecture
logits.

Backbone cells work on H x W feature planes (planar mode). Fusion cells work
on the stacked per-view feature tensor of shape [B, m, N_v, 1]; their kernels
are k x 1 with zero padding along the view axis only, stride is always 1, and
neither the channel count nor N_v ever changes.
"""

from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError
from .nn import (
    Conv2d,
    FactorizedReduce,
    Identity,
    Module,
    Pool2d,
    ReLU,
    Sequential,
    Standardize,
)


class OpKind(Enum):
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    ATROUS_CONV_3X3 = "atrous_conv_3x3"
    ATROUS_CONV_5X5 = "atrous_conv_5x5"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    SKIP_CONNECT = "skip_connect"
    ZERO = "zero"


OP_ORDER = [
    OpKind.SEP_CONV_3X3,
    OpKind.SEP_CONV_5X5,
    OpKind.ATROUS_CONV_3X3,
    OpKind.ATROUS_CONV_5X5,
    OpKind.AVG_POOL_3X3,
    OpKind.MAX_POOL_3X3,
    OpKind.SKIP_CONNECT,
    OpKind.ZERO,
]
OP_INDEX = {kind: i for i, kind in enumerate(OP_ORDER)}
N_OPS = len(OP_ORDER)


class CellType(Enum):
    NORMAL = "normal"
    REDUCTION = "reduction"
    FUSION = "fusion"


N_NODES = 7
INPUT_NODES = (0, 1)
INTERMEDIATE_NODES = (2, 3, 4, 5)
# one edge from every earlier node into each computed node, ordered by (node, source)
EDGES = [(i, j) for j in INTERMEDIATE_NODES for i in range(j)]
EDGE_INDEX = {edge: k for k, edge in enumerate(EDGES)}
N_EDGES = len(EDGES)
assert N_EDGES == 14


class Zero(Module):
    """Emits zeros with the same output shape contract as its siblings."""

    def __init__(self, stride):
        self.stride = stride

    def forward(self, x):
        b, c, h, w = x.shape
        s = self.stride
        if s == 1:
            return ad.Tensor(np.zeros((b, c, h, w)))
        return ad.Tensor(np.zeros((b, c, -(-h // s), -(-w // s))))

    def out_shape(self, shape):
        c, h, w = shape
        s = self.stride
        return (c, -(-h // s), -(-w // s))

    def macs(self, shape):
        return 0


def _geometry(kernel, dilation, mode):
    """Kernel/padding/dilation pairs for planar (k x k) or fusion (k x 1) ops."""
    pad = dilation * (kernel - 1) // 2
    if mode == "planar":
        return (kernel, kernel), (pad, pad), (dilation, dilation)
    return (kernel, 1), (pad, 0), (dilation, 1)


def _sep_conv(rng, channels, kernel, stride, mode):
    k, p, _ = _geometry(kernel, 1, mode)
    block = lambda s: [
        ReLU(),
        Conv2d(rng, channels, channels, k, stride=s, padding=p, groups=channels),
        Conv2d(rng, channels, channels, 1),
        Standardize(),
    ]
    return Sequential(*block(stride), *block(1))


def _atrous_conv(rng, channels, kernel, stride, mode):
    k, p, d = _geometry(kernel, 2, mode)
    return Sequential(
        ReLU(),
        Conv2d(rng, channels, channels, k, stride=stride, padding=p, dilation=d, groups=channels),
        Conv2d(rng, channels, channels, 1),
        Standardize(),
    )


def candidate_op(rng, kind, channels, stride, mode="planar"):
    """Build one candidate operator for an edge.

    stride must be 1 or 2; fusion mode forbids stride 2 (the view axis is
    never downsampled). All ops map `channels` to `channels`.
    """
    if mode not in ("planar", "fusion"):
        raise ConfigurationError(f"mode must be 'planar' or 'fusion', got {mode!r}")
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if mode == "fusion" and stride == 2:
        raise ConfigurationError("fusion cells never stride: the view axis is preserved")
    kind = OpKind(kind)
    if kind is OpKind.SEP_CONV_3X3:
        return _sep_conv(rng, channels, 3, stride, mode)
    if kind is OpKind.SEP_CONV_5X5:
        return _sep_conv(rng, channels, 5, stride, mode)
    if kind is OpKind.ATROUS_CONV_3X3:
        return _atrous_conv(rng, channels, 3, stride, mode)
    if kind is OpKind.ATROUS_CONV_5X5:
        return _atrous_conv(rng, channels, 5, stride, mode)
    if kind in (OpKind.AVG_POOL_3X3, OpKind.MAX_POOL_3X3):
        pool_kind = "avg" if kind is OpKind.AVG_POOL_3X3 else "max"
        k, p, _ = _geometry(3, 1, mode)
        return Pool2d(pool_kind, k, stride=stride, padding=p)
    if kind is OpKind.SKIP_CONNECT:
        if stride == 1:
            return Identity()
        return Sequential(
            ReLU(),
            Conv2d(rng, channels, channels, 1, stride=stride),
            Standardize(),
        )
    return Zero(stride)


def mixed_edge_forward(x, alpha_row, ops):
    """Softmax-weighted blend of all candidate op outputs on one edge.

    Structurally-zero candidates are not evaluated: their term contributes
    exactly zero to the blend and exactly zero gradient to their own mixture
    weight, while the weight still participates in the softmax coupling.
    """
    weights = ad.softmax(alpha_row, axis=-1)
    live = [k for k, op in enumerate(ops) if not isinstance(op, Zero)]
    if live and live == list(range(len(live))) and len(live) < len(ops):
        return ad.weighted_sum([ops[k](x) for k in live], weights[: len(live)])
    return ad.weighted_sum([op(x) for op in ops], weights)


class MixedEdge(Module):
    """One relaxed edge: all 8 candidate ops, blended by an alpha row."""

    def __init__(self, rng, channels, stride, mode):
        self.ops = {kind.value: candidate_op(rng, kind, channels, stride, mode) for kind in OP_ORDER}

    def forward(self, x, alpha_row):
        return mixed_edge_forward(x, alpha_row, [self.ops[k.value] for k in OP_ORDER])


class _OpHolder(Module):
    """Single selected op, stored under the same attribute path a MixedEdge
    uses, so supernet weights transfer onto discrete networks by name."""

    def __init__(self, kind, op):
        self.ops = {kind.value: op}
        self._kind = kind.value

    def forward(self, x):
        return self.ops[self._kind](x)

    def out_shape(self, shape):
        return self.ops[self._kind].out_shape(shape)

    def macs(self, shape):
        return self.ops[self._kind].macs(shape)


class _ChannelAlign(Sequential):
    """ReLU -> 1x1 conv -> standardize onto the cell's working channels."""

    def __init__(self, rng, cin, cout):
        super().__init__(ReLU(), Conv2d(rng, cin, cout, 1), Standardize())


def _edge_stride(cell_type, src):
    return 2 if cell_type is CellType.REDUCTION and src in INPUT_NODES else 1


class _CellBase(Module):
    def __init__(self, rng, cell_type, c_pp, c_p, c_work, reduction_prev):
        self.cell_type = cell_type
        self.c_work = c_work
        if reduction_prev:
            if cell_type is CellType.FUSION:
                raise ConfigurationError("fusion cells never follow a reduction cell")
            self.pre0 = FactorizedReduce(rng, c_pp, c_work)
        else:
            self.pre0 = _ChannelAlign(rng, c_pp, c_work)
        self.pre1 = _ChannelAlign(rng, c_p, c_work)

    @property
    def out_channels(self):
        return 4 * self.c_work

    def _run_nodes(self, x0, x1, edge_outputs):
        """edge_outputs(i, j, x_i) -> Tensor for the edge from node i to j."""
        states = [x0, x1]
        for j in INTERMEDIATE_NODES:
            states.append(ad.add_n([edge_outputs(i, j, states[i]) for i in range(j)]))
        return ad.concat(states[2:], axis=1)


class MixedCell(_CellBase):
    """Cell with every edge relaxed over the full candidate op set."""

    def __init__(self, rng, cell_type, c_pp, c_p, c_work, reduction_prev=False):
        super().__init__(rng, cell_type, c_pp, c_p, c_work, reduction_prev)
        mode = "fusion" if cell_type is CellType.FUSION else "planar"
        self.edges = {
            f"{i}_{j}": MixedEdge(rng, c_work, _edge_stride(cell_type, i), mode)
            for i, j in EDGES
        }

    def forward(self, s_prev_prev, s_prev, alpha):
        if alpha.shape != (N_EDGES, N_OPS):
            raise DimensionError(f"alpha must be [{N_EDGES},{N_OPS}], got {alpha.shape}")
        x0 = self.pre0(s_prev_prev)
        x1 = self.pre1(s_prev)

        def edge_out(i, j, x):
            return self.edges[f"{i}_{j}"](x, alpha[EDGE_INDEX[(i, j)]])

        return self._run_nodes(x0, x1, edge_out)


class FixedCell(_CellBase):
    """Cell with one concrete op per selected edge (post-derivation)."""

    def __init__(self, rng, cell_type, pairs, c_pp, c_p, c_work, reduction_prev=False):
        super().__init__(rng, cell_type, c_pp, c_p, c_work, reduction_prev)
        mode = "fusion" if cell_type is CellType.FUSION else "planar"
        if len(pairs) != 2 * len(INTERMEDIATE_NODES):
            raise ConfigurationError(f"expected 8 (source, op) pairs, got {len(pairs)}")
        self.node_edges = []
        self.edges = {}
        for n, j in enumerate(INTERMEDIATE_NODES):
            keys = []
            for src, kind in pairs[2 * n : 2 * n + 2]:
                kind = OpKind(kind)
                op = candidate_op(rng, kind, c_work, _edge_stride(cell_type, src), mode)
                key = f"{src}_{j}"
                self.edges[key] = _OpHolder(kind, op)
                keys.append((src, key))
            self.node_edges.append((j, keys))

    def forward(self, s_prev_prev, s_prev):
        states = [self.pre0(s_prev_prev), self.pre1(s_prev)]
        for j, keys in self.node_edges:
            states.append(ad.add_n([self.edges[key](states[src]) for src, key in keys]))
        return ad.concat(states[2:], axis=1)


def init_alpha(rng, std=1e-3):
    """Fresh architecture logits: one [14, 8] matrix per cell type."""
    return {
        ct: ad.Tensor(rng.normal(0.0, std, size=(N_EDGES, N_OPS)), requires_grad=True)
        for ct in CellType
    }


def alpha_entropy(alpha_data):
    """Mean per-edge softmax entropy; a collapse indicator for search logs."""
    z = alpha_data - alpha_data.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return float(-(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())
