"""Supernet assembly: stem, backbone cells, fusion cells, and heads.

The backbone (3 normal + 2 reduction cells) runs once per view with shared
weights. Per-view features are globally pooled into vectors f_v, stacked
into F of shape [B, m, N_v, 1], and fused by two sequential fusion cells.
The shape descriptor is the view-axis pooled fusion output, L2-normalized
for retrieval; the shape head reads the un-normalized pooled vector; one
shared view head classifies every f_v.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .nn import Conv2d, Linear, Module, Sequential, Standardize
from .search_space import CellType, FixedCell, MixedCell, init_alpha

BACKBONE_SEQUENCE = (
    CellType.NORMAL,
    CellType.REDUCTION,
    CellType.NORMAL,
    CellType.REDUCTION,
    CellType.NORMAL,
)
N_FUSION_CELLS = 2


@dataclass
class SupernetConfig:
    n_views: int = 4
    init_channels: int = 8
    num_classes: int = 8
    input_resolution: int = 16
    in_channels: int = 1
    descriptor_pooling: str = "avg"

    def __post_init__(self):
        if self.n_views < 2:
            raise ConfigurationError(f"n_views must be >= 2, got {self.n_views}")
        if self.init_channels < 1:
            raise ConfigurationError(f"init_channels must be >= 1, got {self.init_channels}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_resolution < 8 or self.input_resolution % 4:
            raise ConfigurationError(
                "input_resolution must be >= 8 and divisible by 4 (two reduction cells), "
                f"got {self.input_resolution}"
            )
        if self.descriptor_pooling not in ("avg", "max"):
            raise ConfigurationError(
                f"descriptor_pooling must be 'avg' or 'max', got {self.descriptor_pooling!r}"
            )

    @property
    def descriptor_dim(self):
        return 16 * self.init_channels

    def to_dict(self):
        return {
            "n_views": self.n_views,
            "init_channels": self.init_channels,
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
            "in_channels": self.in_channels,
            "descriptor_pooling": self.descriptor_pooling,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ViewBatch:
    images: Tensor  # [B, N_v, C, H, W]
    labels: np.ndarray

    def __post_init__(self):
        if not isinstance(self.images, Tensor):
            self.images = Tensor(self.images)
        if self.images.ndim != 5:
            raise DimensionError(f"images must be [B,N_v,C,H,W], got {self.images.shape}")
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DimensionError(
                f"labels shape {self.labels.shape} does not match batch {self.images.shape[0]}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DimensionError(f"labels must be integers, got {self.labels.dtype}")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class ForwardOutputs:
    view_features: Tensor  # [B, m, N_v]
    view_logits: Tensor  # [B, N_v, num_classes]
    shape_logits: Tensor  # [B, num_classes]
    descriptor: Tensor  # [B, 16 * init_channels], rows unit-norm


class ArchParams:
    """The searched parameters: alpha per cell type plus the 3 loss logits."""

    def __init__(self, alpha, lam):
        self.alpha = alpha
        self.lam = lam

    @classmethod
    def init(cls, rng, std=1e-3):
        alpha = init_alpha(rng, std=std)
        lam = Tensor(rng.normal(0.0, std, size=3), requires_grad=True)
        return cls(alpha, lam)

    def tensors(self):
        return [self.alpha[ct] for ct in CellType] + [self.lam]

    def alpha_tensors(self):
        return [self.alpha[ct] for ct in CellType]

    def copy(self):
        alpha = {
            ct: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for ct, t in self.alpha.items()
        }
        lam = Tensor(self.lam.data.copy(), requires_grad=self.lam.requires_grad)
        return ArchParams(alpha, lam)

    def normalized_loss_weights(self):
        z = self.lam.data - self.lam.data.max()
        w = np.exp(z)
        return w / w.sum()


def _cell_schedule(config):
    """Channel bookkeeping for the fixed stem,N,R,N,R,N,F,F sequence.

    Yields (cell_type, c_prev_prev, c_prev, c_work, reduction_prev) for the
    five backbone cells, then the two fusion cells. Working channels double
    at each reduction; fusion cells keep the final backbone working width,
    so the fused output has 16 * init_channels channels.
    """
    rows = []
    c_pp = c_p = config.init_channels
    c_work = config.init_channels
    reduction_prev = False
    for ct in BACKBONE_SEQUENCE:
        if ct is CellType.REDUCTION:
            c_work *= 2
        rows.append((ct, c_pp, c_p, c_work, reduction_prev))
        c_pp, c_p = c_p, 4 * c_work
        reduction_prev = ct is CellType.REDUCTION
    m = 4 * c_work
    rows.append((CellType.FUSION, m, m, c_work, False))
    rows.append((CellType.FUSION, m, m, c_work, False))
    return rows, m


class _NetworkBase(Module):
    """Shared assembly and forward plumbing for mixed and discrete nets."""

    def __init__(self, config, rng, make_cell):
        self.config = config
        self.stem = Sequential(
            Conv2d(rng, config.in_channels, config.init_channels, 3, stride=1, padding=1),
            Standardize(),
        )
        rows, m = _cell_schedule(config)
        self.m = m
        self.cells = [make_cell(*row) for row in rows[: len(BACKBONE_SEQUENCE)]]
        self.fusion_cells = [make_cell(*row) for row in rows[len(BACKBONE_SEQUENCE) :]]
        self.view_head = Linear(rng, m, config.num_classes)
        self.shape_head = Linear(rng, m, config.num_classes)

    def _check_batch(self, batch):
        cfg = self.config
        b, nv, c, h, w = batch.images.shape
        if nv != cfg.n_views or c != cfg.in_channels or h != cfg.input_resolution or w != h:
            raise DimensionError(
                f"batch images {batch.images.shape} do not match config "
                f"(n_views={cfg.n_views}, in_channels={cfg.in_channels}, "
                f"resolution={cfg.input_resolution})"
            )
        if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= cfg.num_classes):
            raise DimensionError(
                f"labels must lie in [0, {cfg.num_classes}), got "
                f"[{batch.labels.min()}, {batch.labels.max()}]"
            )

    def _forward_impl(self, batch, backbone_cell_fwd, fusion_cell_fwd):
        self._check_batch(batch)
        b, nv = batch.images.shape[0], self.config.n_views
        cfg = self.config
        # All views share one stacked pass (view-major, so each view is one
        # contiguous chunk); grouped statistics keep it exactly equivalent to
        # n_views separate passes through the weight-shared backbone.
        stacked = ad.reshape(
            ad.transpose(batch.images, (1, 0, 2, 3, 4)),
            (nv * b, cfg.in_channels, cfg.input_resolution, cfg.input_resolution),
        )
        with ad.stat_groups(nv):
            s0 = s1 = self.stem(stacked)
            for cell in self.cells:
                s0, s1 = s1, backbone_cell_fwd(cell, s0, s1)
            f = ad.global_avg_pool(s1)  # [N_v * B, m]
        view_features = ad.transpose(ad.reshape(f, (nv, b, self.m)), (1, 2, 0))  # [B, m, N_v]
        view_logits = ad.transpose(
            ad.reshape(self.view_head(f), (nv, b, cfg.num_classes)), (1, 0, 2)
        )  # [B, N_v, K]

        s0 = s1 = ad.reshape(view_features, (b, self.m, self.config.n_views, 1))
        for cell in self.fusion_cells:
            s0, s1 = s1, fusion_cell_fwd(cell, s0, s1)
        if self.config.descriptor_pooling == "avg":
            pooled = ad.global_avg_pool(s1)
        else:
            pooled = ad.global_max_pool(s1)
        return ForwardOutputs(
            view_features=view_features,
            view_logits=view_logits,
            shape_logits=self.shape_head(pooled),
            descriptor=ad.l2_normalize(pooled, axis=1),
        )


class Supernet(_NetworkBase):
    """All candidate ops live simultaneously; forward needs ArchParams."""

    def __init__(self, config, rng):
        super().__init__(
            config,
            rng,
            lambda ct, c_pp, c_p, c_work, red_prev: MixedCell(
                rng, ct, c_pp, c_p, c_work, reduction_prev=red_prev
            ),
        )

    def forward(self, batch, arch):
        return self._forward_impl(
            batch,
            lambda cell, s0, s1: cell(s0, s1, arch.alpha[cell.cell_type]),
            lambda cell, s0, s1: cell(s0, s1, arch.alpha[CellType.FUSION]),
        )


class DiscreteNetwork(_NetworkBase):
    """One selected op per edge, as specified by derived genotype pairs."""

    def __init__(self, config, cell_pairs, rng):
        missing = [ct for ct in CellType if ct not in cell_pairs]
        if missing:
            raise ConfigurationError(f"genotype missing cell types: {missing}")
        super().__init__(
            config,
            rng,
            lambda ct, c_pp, c_p, c_work, red_prev: FixedCell(
                rng, ct, cell_pairs[ct], c_pp, c_p, c_work, reduction_prev=red_prev
            ),
        )

    def forward(self, batch):
        run = lambda cell, s0, s1: cell(s0, s1)
        return self._forward_impl(batch, run, run)


def transfer_weights(src, dst):
    """Copy parameters from src onto dst by name.

    Every dst parameter name must exist in src with an identical shape; the
    discrete network's paths are a subset of the supernet's by construction.
    """
    src_params = dict(src.named_params())
    for name, p in dst.named_params():
        if name not in src_params:
            raise ConfigurationError(f"no source parameter named {name!r}")
        sp = src_params[name]
        if sp.data.shape != p.data.shape:
            raise DimensionError(
                f"parameter {name!r}: source shape {sp.data.shape} vs {p.data.shape}"
            )
        p.data = sp.data.copy()


def compute_losses(outputs, labels):
    """The three task losses from one forward pass.

    L1: cross entropy of the shape head. L2: mean over views of cross
    entropy of the shared view head (every view inherits the shape label).
    L3: sum over ordered pairs of differently-labeled samples of
    max(d_i . d_j, 0), the hinge that pushes inter-class descriptors apart.
    """
    labels = np.asarray(labels)
    l1 = ad.cross_entropy(outputs.shape_logits, labels)
    n_views = outputs.view_logits.shape[1]
    per_view = [
        ad.cross_entropy(outputs.view_logits[:, v, :], labels) for v in range(n_views)
    ]
    l2 = ad.add_n(per_view) * (1.0 / n_views)
    d = outputs.descriptor
    sims = ad.matmul(d, ad.transpose(d))
    diff_class = (labels[:, None] != labels[None, :]).astype(np.float64)
    l3 = ad.sum_(ad.relu(sims) * Tensor(diff_class))
    return l1, l2, l3
