"""Discretization of converged architecture logits into a genotype, plus
serialization (JSON round-trip, DOT rendering) and helpers for building
comparison baselines.

A genotype fixes, for each cell type, two incoming edges per intermediate
node and one concrete op per kept edge: rank a node's incoming edges by the
strongest non-zero mixing weight, keep the top two, and keep that strongest
op on each. The zero op can never be selected; it exists only to let the
search silence an edge.
"""

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ValidationError
from .search_space import (
    EDGE_INDEX,
    INTERMEDIATE_NODES,
    N_EDGES,
    N_OPS,
    OP_INDEX,
    OP_ORDER,
    CellType,
    OpKind,
)
from .supernet import ArchParams, SupernetConfig

__all__ = [
    "Genotype",
    "derive_genotype",
    "random_genotype",
    "saturated_alpha",
    "to_json",
    "from_json",
    "to_dot",
]

_NON_ZERO_OPS = tuple(k for k in OP_ORDER if k is not OpKind.ZERO)
_NON_ZERO_IDX = np.array([OP_INDEX[k] for k in _NON_ZERO_OPS])

_DOT_LABELS = {
    OpKind.SEP_CONV_3X3: "sep_3x3",
    OpKind.SEP_CONV_5X5: "sep_5x5",
    OpKind.ATROUS_CONV_3X3: "dil_3x3",
    OpKind.ATROUS_CONV_5X5: "dil_5x5",
    OpKind.AVG_POOL_3X3: "avg_3x3",
    OpKind.MAX_POOL_3X3: "max_3x3",
    OpKind.SKIP_CONNECT: "skip",
}


@dataclass(frozen=True)
class Genotype:
    """Selected (source, op) pairs per cell type, node-major (two per node),
    with the normalized loss weights and network config they were found
    under."""

    cells: dict  # CellType -> tuple of 8 (source_node, OpKind) pairs
    loss_weights: tuple  # normalized, sums to 1
    net_config: SupernetConfig

    def validate(self):
        problems = []
        for ct in CellType:
            if ct not in self.cells:
                problems.append(f"missing cell type {ct.value!r}")
                continue
            pairs = self.cells[ct]
            if len(pairs) != 2 * len(INTERMEDIATE_NODES):
                problems.append(
                    f"cell {ct.value!r} has {len(pairs)} pairs, expected "
                    f"{2 * len(INTERMEDIATE_NODES)}"
                )
                continue
            for n, node in enumerate(INTERMEDIATE_NODES):
                chosen = pairs[2 * n : 2 * n + 2]
                sources = [src for src, _ in chosen]
                if len(set(sources)) != 2:
                    problems.append(
                        f"cell {ct.value!r} node {node}: sources {sources} are not distinct"
                    )
                for src, kind in chosen:
                    if not 0 <= src < node:
                        problems.append(
                            f"cell {ct.value!r} node {node}: source {src} does not precede it"
                        )
                    if OpKind(kind) is OpKind.ZERO:
                        problems.append(f"cell {ct.value!r} node {node}: zero op selected")
        w = np.asarray(self.loss_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-6:
            problems.append(f"loss weights {self.loss_weights} are not a normalized 3-vector")
        if problems:
            raise ValidationError("invalid genotype: " + "; ".join(problems))
        return self


def derive_genotype(arch, net_config):
    """Prune ArchParams to the discrete architecture.

    Per intermediate node: rank incoming edges by their largest non-zero
    softmax weight, keep the two strongest, and keep that op on each. Ties
    break toward the lower source index, then the lower op index. Ranking
    only compares within-row softmax values, so adding any constant to a
    row's logits cannot change the outcome.
    """
    cells = {}
    for ct in CellType:
        logits = arch.alpha[ct].data
        if logits.shape != (N_EDGES, N_OPS) or not np.all(np.isfinite(logits)):
            raise ValidationError(
                f"alpha for cell {ct.value!r} must be finite [{N_EDGES},{N_OPS}], "
                f"got {logits.shape}"
            )
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        pairs = []
        for node in INTERMEDIATE_NODES:
            rows = [probs[EDGE_INDEX[(src, node)]][_NON_ZERO_IDX] for src in range(node)]
            strength = [row.max() for row in rows]
            keep = sorted(range(node), key=lambda s: (-strength[s], s))[:2]
            for src in sorted(keep):
                pairs.append((src, _NON_ZERO_OPS[int(np.argmax(rows[src]))]))
        cells[ct] = tuple(pairs)
    return Genotype(
        cells=cells,
        loss_weights=tuple(float(w) for w in arch.normalized_loss_weights()),
        net_config=net_config,
    ).validate()


def random_genotype(rng, net_config, loss_weights=None):
    """A uniformly random valid genotype, the baseline for search quality."""
    if loss_weights is None:
        loss_weights = (1 / 3, 1 / 3, 1 / 3)
    cells = {}
    for ct in CellType:
        pairs = []
        for node in INTERMEDIATE_NODES:
            for src in sorted(rng.choice(node, size=2, replace=False).tolist()):
                pairs.append((int(src), _NON_ZERO_OPS[int(rng.integers(len(_NON_ZERO_OPS)))]))
        cells[ct] = tuple(pairs)
    return Genotype(
        cells=cells, loss_weights=tuple(float(w) for w in loss_weights),
        net_config=net_config,
    ).validate()


def saturated_alpha(genotype, magnitude=40.0):
    """Logits that drive the relaxed network onto the genotype: the selected
    op gets +magnitude on its edge, unselected edges put +magnitude on zero,
    and everything else sits at -magnitude. The leaked mass per edge is
    about 7 * exp(-2 * magnitude), far below femto-scale at the default."""
    genotype.validate()
    alpha = {}
    for ct in CellType:
        logits = np.full((N_EDGES, N_OPS), -magnitude)
        logits[:, OP_INDEX[OpKind.ZERO]] = magnitude
        pairs = genotype.cells[ct]
        for n, node in enumerate(INTERMEDIATE_NODES):
            for src, kind in pairs[2 * n : 2 * n + 2]:
                row = EDGE_INDEX[(src, node)]
                logits[row, :] = -magnitude
                logits[row, OP_INDEX[OpKind(kind)]] = magnitude
        alpha[ct] = Tensor(logits)
    return alpha


def saturated_arch(genotype, magnitude=40.0):
    lam = np.log(np.asarray(genotype.loss_weights, dtype=np.float64))
    return ArchParams(saturated_alpha(genotype, magnitude), Tensor(lam))


# --- serialization -----------------------------------------------------------


def to_json(genotype, indent=2):
    genotype.validate()
    cells = {}
    for ct in CellType:
        pairs = genotype.cells[ct]
        cells[ct.value] = {
            str(node): [[src, OpKind(kind).value] for src, kind in pairs[2 * n : 2 * n + 2]]
            for n, node in enumerate(INTERMEDIATE_NODES)
        }
    doc = {
        "cells": cells,
        "loss_weights": list(genotype.loss_weights),
        "net_config": genotype.net_config.to_dict(),
    }
    return json.dumps(doc, indent=indent)


def from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"genotype is not valid JSON: {e}") from e
    for key in ("cells", "loss_weights", "net_config"):
        if key not in doc:
            raise ValidationError(f"genotype JSON is missing {key!r}")
    cells = {}
    for ct in CellType:
        if ct.value not in doc["cells"]:
            raise ValidationError(f"genotype JSON is missing cell type {ct.value!r}")
        by_node = doc["cells"][ct.value]
        pairs = []
        for node in INTERMEDIATE_NODES:
            if str(node) not in by_node:
                raise ValidationError(
                    f"cell {ct.value!r} is missing edges for node {node}"
                )
            entries = by_node[str(node)]
            if len(entries) != 2:
                raise ValidationError(
                    f"cell {ct.value!r} node {node} has {len(entries)} edges, expected 2"
                )
            for entry in entries:
                src, kind = entry
                try:
                    kind = OpKind(kind)
                except ValueError as e:
                    raise ValidationError(
                        f"cell {ct.value!r} node {node}: unknown op {kind!r}"
                    ) from e
                pairs.append((int(src), kind))
        cells[ct] = tuple(pairs)
    return Genotype(
        cells=cells,
        loss_weights=tuple(float(w) for w in doc["loss_weights"]),
        net_config=SupernetConfig.from_dict(doc["net_config"]),
    ).validate()


def to_dot(genotype):
    """GraphViz text: one cluster per cell type, one labeled edge per
    selected op, dashed unlabeled edges into the concat output node."""
    genotype.validate()

    def node_name(ct, i):
        base = {0: "in0", 1: "in1"}.get(i, f"n{i}")
        return f"{ct.value}_{base}"

    lines = ["digraph genotype {", "  rankdir=LR;", "  node [shape=box];"]
    for ct in CellType:
        lines.append(f"  subgraph cluster_{ct.value} {{")
        lines.append(f'    label="{ct.value}";')
        for i in (0, 1):
            lines.append(f'    {node_name(ct, i)} [label="c[k-{2 - i}]"];')
        for node in INTERMEDIATE_NODES:
            lines.append(f'    {node_name(ct, node)} [label="{node}"];')
        lines.append(f'    {ct.value}_out [label="concat"];')
        pairs = genotype.cells[ct]
        for n, node in enumerate(INTERMEDIATE_NODES):
            for src, kind in pairs[2 * n : 2 * n + 2]:
                label = _DOT_LABELS[OpKind(kind)]
                lines.append(
                    f'    {node_name(ct, src)} -> {node_name(ct, node)} [label="{label}"];'
                )
            lines.append(f"    {node_name(ct, node)} -> {ct.value}_out [style=dashed];")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
