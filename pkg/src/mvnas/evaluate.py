"""Retraining a derived architecture from scratch and measuring it:
classification accuracy (overall and per-class) plus retrieval quality
(mAP and precision-recall AUC) over cosine-ranked descriptors.

Retrieval protocol: every test shape queries the gallery (by default the
test set itself, with the query excluded); gallery items sharing the query
label are relevant. The descriptor head emits unit-norm vectors, so cosine
similarity is a plain dot product. AP is the mean of precision at each
relevant rank; the PR curve for AUC starts at (recall 0, precision 1) and
adds a point after every rank, integrated by the trapezoidal rule.
"""

import json
import warnings
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .cost import network_cost
from .data import iter_batches, make_batch
from .errors import ConfigurationError, NumericError
from .optim import SGD, clip_gradients
from .supernet import DiscreteNetwork, SupernetConfig, compute_losses

__all__ = ["RetrainConfig", "RetrainEpoch", "MetricsReport", "retrain", "evaluate",
           "average_precision", "retrieval_metrics", "save_model", "load_model"]


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 30
    batch_size: int = 36
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    grad_clip_norm: float = 5.0
    loss_weights: tuple = (1.0, 1.0, 1.0)
    init_channels: int = 8
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the run
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr <= 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}"
            )
        if len(self.loss_weights) != 3 or self.loss_weights[0] != 1.0:
            raise ConfigurationError(
                f"loss_weights must be 3 values with the first pinned to 1, "
                f"got {self.loss_weights}"
            )
        if any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(f"loss_weights must be non-negative, got {self.loss_weights}")


@dataclass
class RetrainEpoch:
    epoch: int
    losses: np.ndarray  # mean (L1, L2, L3) over the epoch
    total: float


def _weighted_total(losses, weights):
    """Fixed-weight combination w1*L1 + w2*L2 + w3*L3 (no normalization)."""
    for i, loss in enumerate(losses):
        if not np.all(np.isfinite(loss.data)):
            raise NumericError(f"loss L{i + 1} is non-finite")
    return ad.weighted_sum([ad.reshape(l, ()) for l in losses], Tensor(np.asarray(weights)))


def retrain(genotype, dataset, config):
    """Train the discrete network from scratch on the full dataset.

    Uses the genotype's network config with the retrain channel width; the
    dataset must match that config's views/resolution/classes.
    """
    genotype.validate()
    fields = genotype.net_config.to_dict()
    fields["init_channels"] = config.init_channels
    net_config = SupernetConfig(**fields)
    if (net_config.n_views != dataset.n_views
            or net_config.input_resolution != dataset.resolution
            or net_config.num_classes != len(dataset.class_names)):
        raise ConfigurationError(
            f"genotype network config (n_views={net_config.n_views}, "
            f"resolution={net_config.input_resolution}, "
            f"classes={net_config.num_classes}) does not match dataset "
            f"(n_views={dataset.n_views}, resolution={dataset.resolution}, "
            f"classes={len(dataset.class_names)})"
        )
    net = DiscreteNetwork(net_config, genotype.cells, np.random.default_rng([config.seed, 0]))
    opt = SGD(net.params(), config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    weights = np.asarray(config.loss_weights, dtype=np.float64)

    log = []
    with ad.finite_checks(False):
        for epoch in range(config.epochs):
            if config.lr_schedule == "cosine":
                opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
            per_step = []
            for batch in iter_batches(dataset, config.batch_size, rng=shuffle_rng):
                losses = compute_losses(net(batch), batch.labels)
                total = _weighted_total(losses, weights)
                opt.zero_grad()
                backward(total)
                clip_gradients(
                    [p.grad for p in opt.params if p.grad is not None],
                    config.grad_clip_norm,
                )
                opt.step()
                per_step.append([float(l.data) for l in losses])
            mean = np.mean(per_step, axis=0)
            log.append(RetrainEpoch(epoch=epoch, losses=mean, total=float(mean @ weights)))
    opt.zero_grad()
    return net, log


@dataclass(frozen=True)
class MetricsReport:
    overall_accuracy: float
    per_class_accuracy: float  # unweighted mean over classes
    mAP: float
    auc: float
    params: int
    macs: int
    seed: int
    genotype_json: str
    skipped_queries: int = 0

    def to_json(self, indent=2):
        doc = {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "mAP": self.mAP,
            "auc": self.auc,
            "params": self.params,
            "macs": self.macs,
            "seed": self.seed,
            "skipped_queries": self.skipped_queries,
            "genotype": json.loads(self.genotype_json) if self.genotype_json else None,
        }
        return json.dumps(doc, indent=indent)

    def format_table(self):
        rows = [
            ("overall accuracy", f"{self.overall_accuracy:.4f}"),
            ("per-class accuracy", f"{self.per_class_accuracy:.4f}"),
            ("mAP", f"{self.mAP:.4f}"),
            ("PR-curve AUC", f"{self.auc:.4f}"),
            ("params", f"{self.params:,}"),
            ("MACs", f"{self.macs:,}"),
            ("seed", str(self.seed)),
        ]
        if self.skipped_queries:
            rows.append(("skipped queries", str(self.skipped_queries)))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def average_precision(ranked_relevant, n_relevant):
    """AP and PR-curve AUC for one query given a ranked relevance mask."""
    ranked_relevant = np.asarray(ranked_relevant, dtype=bool)
    hits = np.cumsum(ranked_relevant)
    ranks = np.arange(1, ranked_relevant.size + 1)
    precision = hits / ranks
    ap = float(precision[ranked_relevant].sum() / n_relevant)
    recall = hits / n_relevant
    auc = float(np.trapezoid(np.concatenate(([1.0], precision)),
                             np.concatenate(([0.0], recall))))
    return ap, auc


def _forward_dataset(model, dataset, batch_size=64):
    logits, descriptors = [], []
    with ad.no_grad(), ad.finite_checks(False):
        for start in range(0, len(dataset), batch_size):
            batch = make_batch(dataset, range(start, min(start + batch_size, len(dataset))))
            out = model(batch)
            logits.append(out.shape_logits.data)
            descriptors.append(out.descriptor.data)
    return np.concatenate(logits), np.concatenate(descriptors)


def retrieval_metrics(desc, labels, g_desc=None, g_labels=None, query_ids=None):
    """Mean AP and PR-AUC of every query against the gallery by cosine rank.

    With no explicit gallery the queries rank themselves, each excluded from
    its own ranking. Queries whose class has no gallery entries are skipped
    with a warning and counted. Returns (mAP, AUC, skipped).
    """
    self_match = g_desc is None
    if self_match:
        g_desc, g_labels = desc, labels
    sims = desc @ g_desc.T
    aps, aucs, skipped = [], [], 0
    for q in range(len(labels)):
        keep = np.ones(len(g_labels), dtype=bool)
        if self_match:
            keep[q] = False
        relevant = (g_labels == labels[q]) & keep
        n_rel = int(relevant.sum())
        if n_rel == 0:
            name = query_ids[q] if query_ids is not None else f"#{q}"
            warnings.warn(f"query {name}: class has no gallery entries, skipping")
            skipped += 1
            continue
        order = np.argsort(-sims[q][keep], kind="stable")
        ap, auc = average_precision(relevant[keep][order], n_rel)
        aps.append(ap)
        aucs.append(auc)
    if not aps:
        raise ConfigurationError("no evaluable retrieval queries")
    return float(np.mean(aps)), float(np.mean(aucs)), skipped


def evaluate(model, test_set, gallery=None, genotype_json="", seed=0):
    """Classification and retrieval metrics on a held-out set.

    With no explicit gallery the test set queries itself and each query is
    excluded from its own ranking. Queries whose class has no other gallery
    member are skipped with a warning and counted in the report.
    """
    logits, desc = _forward_dataset(model, test_set)
    labels = test_set.labels
    preds = np.argmax(logits, axis=1)
    overall = float(np.mean(preds == labels))
    per_class = [
        float(np.mean(preds[labels == c] == c))
        for c in range(len(test_set.class_names))
        if np.any(labels == c)
    ]

    self_match = gallery is None or gallery is test_set
    if self_match:
        g_desc, g_labels = None, None
    else:
        _, g_desc = _forward_dataset(model, gallery)
        g_labels = gallery.labels
    mean_ap, mean_auc, skipped = retrieval_metrics(
        desc, labels, g_desc, g_labels,
        query_ids=[s.shape_id for s in test_set.samples],
    )

    report_cost = network_cost(model)
    return MetricsReport(
        overall_accuracy=overall,
        per_class_accuracy=float(np.mean(per_class)),
        mAP=mean_ap,
        auc=mean_auc,
        params=report_cost.params,
        macs=report_cost.macs,
        seed=seed,
        genotype_json=genotype_json,
        skipped_queries=skipped,
    )


def save_model(path, net, genotype, seed):
    """Persist a retrained network: weights plus the genotype that built it."""
    from .genotype import to_json

    meta = {
        "net_config": net.config.to_dict(),
        "genotype": json.loads(to_json(genotype)),
        "seed": int(seed),
    }
    arrays = {f"w/{name}": p.data for name, p in net.named_params()}
    blob = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, meta=blob, **arrays)


def load_model(path):
    """Rebuild a retrained network from ``save_model`` output.

    Returns ``(net, genotype_json, seed)``.
    """
    from .genotype import from_json

    try:
        archive = np.load(path)
    except (ValueError, EOFError, zipfile.BadZipFile) as e:
        raise ConfigurationError(f"{path} is not a saved model: {e}") from e
    with archive:
        if "meta" not in archive:
            raise ConfigurationError(f"{path} is not a saved model (no meta entry)")
        meta = json.loads(archive["meta"].tobytes().decode())
        genotype_json = json.dumps(meta["genotype"])
        genotype = from_json(genotype_json)
        config = SupernetConfig.from_dict(meta["net_config"])
        net = DiscreteNetwork(config, genotype.cells, np.random.default_rng(0))
        named = dict(net.named_params())
        stored = {k[2:] for k in archive.files if k.startswith("w/")}
        if stored != set(named):
            missing = sorted(set(named) - stored)[:3]
            extra = sorted(stored - set(named))[:3]
            raise ConfigurationError(
                f"saved weights do not match the genotype's network "
                f"(missing {missing}, unexpected {extra})"
            )
        for name, param in named.items():
            data = archive[f"w/{name}"]
            if data.shape != param.data.shape:
                raise ConfigurationError(
                    f"saved weight {name} has shape {data.shape}, "
                    f"expected {param.data.shape}"
                )
            param.data = data.astype(np.float64)
    return net, genotype_json, int(meta["seed"])
