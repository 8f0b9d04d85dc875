"""Parameter and multiply-accumulate accounting for a derived architecture.

Counts are for one forward pass of an N_v-view sequence at a stated
resolution: per-view work (stem, backbone cells, the shared view head) is
multiplied by N_v, the fused tail (fusion cells, shape head) runs once, and
parameters are counted once throughout since every view shares weights. One
MAC is one multiply plus one accumulate; pooling, normalization, and
activations count zero.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .supernet import DiscreteNetwork, SupernetConfig

__all__ = ["CostReport", "cost_model", "network_cost"]


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    n_views: int
    resolution: int
    rows: tuple  # (section, params, macs) per network section

    def to_json(self, indent=2):
        return json.dumps(
            {
                "params": self.params,
                "macs": self.macs,
                "n_views": self.n_views,
                "resolution": self.resolution,
                "sections": [
                    {"section": name, "params": p, "macs": m} for name, p, m in self.rows
                ],
            },
            indent=indent,
        )

    def format_table(self):
        name_w = max(len("section"), *(len(name) for name, _, _ in self.rows))
        header = f"{'section':<{name_w}}  {'params':>12}  {'macs':>14}"
        sep = "-" * len(header)
        lines = [header, sep]
        for name, p, m in self.rows:
            lines.append(f"{name:<{name_w}}  {p:>12,}  {m:>14,}")
        lines.append(sep)
        lines.append(f"{'total':<{name_w}}  {self.params:>12,}  {self.macs:>14,}")
        lines.append(
            f"(one {self.n_views}-view pass at {self.resolution}x{self.resolution})"
        )
        return "\n".join(lines)


def _cell_cost(cell, shape_pp, shape_p):
    """MACs through one fixed cell given its two input shapes; returns
    (macs, output shape)."""
    macs = cell.pre0.macs(shape_pp) + cell.pre1.macs(shape_p)
    states = [cell.pre0.out_shape(shape_pp), cell.pre1.out_shape(shape_p)]
    for _, keys in cell.node_edges:
        node_shape = None
        for src, key in keys:
            holder = cell.edges[key]
            macs += holder.macs(states[src])
            node_shape = holder.out_shape(states[src])
        states.append(node_shape)
    c, h, w = states[2]
    return macs, (cell.out_channels, h, w)


def network_cost(net):
    """Count params and MACs by walking an instantiated discrete network."""
    cfg = net.config
    rows = []
    nv = cfg.n_views

    shape = (cfg.in_channels, cfg.input_resolution, cfg.input_resolution)
    rows.append(("stem", net.stem.param_count(), net.stem.macs(shape) * nv))
    s_pp = s_p = net.stem.out_shape(shape)
    for i, cell in enumerate(net.cells):
        macs, out = _cell_cost(cell, s_pp, s_p)
        rows.append((f"{cell.cell_type.value}_cell_{i}", cell.param_count(), macs * nv))
        s_pp, s_p = s_p, out

    feat = (net.m,)  # global average pool, 0 MACs
    rows.append(("view_head", net.view_head.param_count(), net.view_head.macs(feat) * nv))

    s_pp = s_p = (net.m, nv, 1)
    for i, cell in enumerate(net.fusion_cells):
        macs, out = _cell_cost(cell, s_pp, s_p)
        rows.append((f"fusion_cell_{i}", cell.param_count(), macs))
        s_pp, s_p = s_p, out
    rows.append(("shape_head", net.shape_head.param_count(), net.shape_head.macs(feat)))

    params = net.param_count()
    macs = sum(m for _, _, m in rows)
    if params <= 0 or macs <= 0:
        raise ConfigurationError(f"degenerate cost accounting: params={params}, macs={macs}")
    return CostReport(
        params=params,
        macs=macs,
        n_views=nv,
        resolution=cfg.input_resolution,
        rows=tuple(rows),
    )


def cost_model(genotype, config=None, resolution=None, n_views=None):
    """Walk the discrete network the genotype describes and count work.

    config/resolution/n_views override the genotype's own network config,
    so one genotype can be costed at paper scale and desk scale alike.
    """
    genotype.validate()
    base = genotype.net_config if config is None else config
    fields = base.to_dict()
    if resolution is not None:
        fields["input_resolution"] = resolution
    if n_views is not None:
        fields["n_views"] = n_views
    cfg = SupernetConfig(**fields)
    net = DiscreteNetwork(cfg, genotype.cells, np.random.default_rng(0))
    return network_cost(net)
