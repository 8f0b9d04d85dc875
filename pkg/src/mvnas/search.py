"""The alternating search loop: architecture logits and loss logits descend
the validation objective while network weights descend the training
objective, with a warmup phase that trains weights only.

One step runs four phases in order: (1) forward the validation batch and
compute the weighted total loss plus the per-loss training rates; (2) update
alpha by an adaptive-moment step on the validation gradient (first-order:
the weights are frozen, no inner unroll); (3) update lambda by plain SGD on
the rate regularizer, whose gradient is exactly rates - 1; (4) forward the
training batch and update the weights by SGD with a global gradient-norm
clip. During warmup, phases 2 and 3 are skipped and the validation pass
runs without building a graph; the rate history still accumulates so the
first post-warmup lambda step sees meaningful rates.
"""

import csv
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import backward
from .data import iter_batches, split_train_val
from .errors import ConfigurationError
from .loss_balance import N_LOSSES, RateTracker, normalized_weights, total_loss
from .optim import SGD, Adam, clip_gradients
from .search_space import alpha_entropy
from .supernet import ArchParams, CellType, Supernet, SupernetConfig, compute_losses

__all__ = [
    "SearchConfig",
    "SearchState",
    "StepLog",
    "EpochLog",
    "SearchResult",
    "make_search_state",
    "search_step",
    "run_search",
    "write_log_csv",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 25
    batch_size: int = 36
    w_lr: float = 0.01
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_betas: tuple = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    lambda_lr: float = 0.05
    lambda_momentum: float = 0.0
    grad_clip_norm: float = 5.0
    warmup_epochs: int = 5
    rate_beta: float = 0.9
    val_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("w_lr", "alpha_lr", "lambda_lr"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        # a zero-epoch run is a legitimate no-op, so the warmup bound only
        # applies when there is something to warm up into
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"warmup_epochs must lie in [0, epochs), got "
                f"{self.warmup_epochs} with epochs={self.epochs}"
            )
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.grad_clip_norm <= 0.0:
            raise ConfigurationError(
                f"grad_clip_norm must be positive, got {self.grad_clip_norm}"
            )


@dataclass
class StepLog:
    losses_train: np.ndarray
    losses_val: np.ndarray
    rates: np.ndarray
    loss_weights: np.ndarray
    w_grad_norm: float
    arch_updated: bool


@dataclass
class EpochLog:
    epoch: int
    losses_train: np.ndarray  # mean over the epoch's steps
    losses_val: np.ndarray
    loss_weights: np.ndarray  # normalized lambda at epoch end
    alpha_entropy: float


@dataclass
class SearchState:
    net: Supernet
    arch: ArchParams
    w_opt: SGD
    alpha_opt: Adam
    lam_opt: SGD
    tracker: RateTracker
    config: SearchConfig
    epoch: int = 0


@dataclass
class SearchResult:
    trajectory: list  # ArchParams copy per epoch, index 0 = initialization
    final: ArchParams
    log: list = field(default_factory=list)  # EpochLog per epoch
    state: SearchState = None


def make_search_state(config, net_config, init_rng):
    net = Supernet(net_config, init_rng)
    arch = ArchParams.init(init_rng)
    return SearchState(
        net=net,
        arch=arch,
        w_opt=SGD(
            net.params(), config.w_lr,
            momentum=config.w_momentum, weight_decay=config.w_weight_decay,
        ),
        alpha_opt=Adam(
            arch.alpha_tensors(), config.alpha_lr,
            betas=config.alpha_betas, weight_decay=config.alpha_weight_decay,
        ),
        # lambda descends only the rate regularizer: no decay, by default no
        # momentum, so sign(delta lambda_i) = -sign(r_i - 1) exactly
        lam_opt=SGD([arch.lam], config.lambda_lr, momentum=config.lambda_momentum),
        tracker=RateTracker(beta=config.rate_beta, zero_guard=True),
        config=config,
    )


def _set_requires_grad(tensors, flag):
    for t in tensors:
        t.requires_grad = flag


def search_step(state, train_batch, val_batch, update_arch=True):
    """One alternating update; returns the step's losses and diagnostics."""
    net, arch, cfg = state.net, state.arch, state.config
    w_params = state.w_opt.params

    # (1) validation forward: total loss and training rates
    _set_requires_grad(w_params, False)
    try:
        if update_arch:
            out = net(val_batch, arch)
            losses_val = compute_losses(out, val_batch.labels)
            lt_val = total_loss(losses_val, arch.lam)
        else:
            with ad.no_grad():
                out = net(val_batch, arch)
                losses_val = compute_losses(out, val_batch.labels)
                total_loss(losses_val, arch.lam)  # runs the divergence check
        vals = np.array([float(l.data) for l in losses_val])
        rates = state.tracker.update(vals)

        if update_arch:
            # (2) alpha descends the validation total loss
            state.alpha_opt.zero_grad()
            backward(lt_val)
            state.alpha_opt.step()
            state.alpha_opt.zero_grad()
            # (3) lambda descends the rate regularizer; its gradient is
            # rates - 1 in closed form, no graph required
            arch.lam.grad = rates - 1.0
            state.lam_opt.step()
            arch.lam.grad = None
    finally:
        _set_requires_grad(w_params, True)

    # (4) training forward: weights descend the total loss, alpha and
    # lambda held out of the graph
    _set_requires_grad(arch.alpha_tensors(), False)
    try:
        out = net(train_batch, arch)
        losses_tr = compute_losses(out, train_batch.labels)
        lt_tr = total_loss(losses_tr, arch.lam)
        state.w_opt.zero_grad()
        backward(lt_tr)
    finally:
        _set_requires_grad(arch.alpha_tensors(), True)
    _, norm = clip_gradients(
        [p.grad for p in w_params if p.grad is not None], cfg.grad_clip_norm
    )
    state.w_opt.step()
    state.w_opt.zero_grad()

    return StepLog(
        losses_train=np.array([float(l.data) for l in losses_tr]),
        losses_val=vals,
        rates=rates,
        loss_weights=normalized_weights(arch.lam),
        w_grad_norm=norm,
        arch_updated=update_arch,
    )


def mean_alpha_entropy(arch):
    """Mean per-edge softmax entropy across cell types."""
    return float(np.mean([alpha_entropy(t.data) for t in arch.alpha_tensors()]))


def run_search(config, dataset, net_config=None, log_path=None, checkpoint_path=None,
               resume_from=None):
    """Split the dataset 50/50, then alternate weight and architecture
    updates for config.epochs epochs. Deterministic given config.seed."""
    if net_config is None:
        net_config = SupernetConfig(
            n_views=dataset.n_views,
            num_classes=len(dataset.class_names),
            input_resolution=dataset.resolution,
        )
    if (net_config.n_views != dataset.n_views
            or net_config.input_resolution != dataset.resolution
            or net_config.num_classes != len(dataset.class_names)):
        raise ConfigurationError(
            f"network config (n_views={net_config.n_views}, "
            f"resolution={net_config.input_resolution}, "
            f"classes={net_config.num_classes}) does not match dataset "
            f"(n_views={dataset.n_views}, resolution={dataset.resolution}, "
            f"classes={len(dataset.class_names)})"
        )
    train_set, val_set = split_train_val(
        dataset, fraction=config.val_fraction, seed=config.seed
    )
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("train/val split produced an empty side")

    if resume_from is not None:
        state, shuffle_rng = load_checkpoint(resume_from)
        # extending the horizon is what resuming is for; everything else
        # (learning rates, seed, batch size, ...) must match the checkpoint
        saved = {k: v for k, v in asdict(state.config).items() if k != "epochs"}
        asked = {k: v for k, v in asdict(config).items() if k != "epochs"}
        if saved != asked:
            drift = sorted(k for k in saved if saved[k] != asked[k])
            raise ConfigurationError(
                f"checkpoint was written with a different search config "
                f"(differs in: {', '.join(drift)})"
            )
        state.config = config
    else:
        state = make_search_state(config, net_config, np.random.default_rng([config.seed, 0]))
        shuffle_rng = np.random.default_rng([config.seed, 1])

    trajectory = [state.arch.copy()]
    epoch_logs = []
    with ad.finite_checks(False):  # divergence is still caught per loss
        for epoch in range(state.epoch, config.epochs):
            update_arch = epoch >= config.warmup_epochs
            step_logs = []
            val_iter = iter_batches(val_set, config.batch_size, rng=shuffle_rng)
            for train_batch in iter_batches(train_set, config.batch_size, rng=shuffle_rng):
                val_batch = next(val_iter, None)
                if val_batch is None:
                    val_iter = iter_batches(val_set, config.batch_size, rng=shuffle_rng)
                    val_batch = next(val_iter)
                step_logs.append(search_step(state, train_batch, val_batch, update_arch))
            state.epoch = epoch + 1
            epoch_logs.append(
                EpochLog(
                    epoch=epoch,
                    losses_train=np.mean([s.losses_train for s in step_logs], axis=0),
                    losses_val=np.mean([s.losses_val for s in step_logs], axis=0),
                    loss_weights=normalized_weights(state.arch.lam),
                    alpha_entropy=mean_alpha_entropy(state.arch),
                )
            )
            trajectory.append(state.arch.copy())
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state, shuffle_rng)
    if log_path is not None:
        write_log_csv(epoch_logs, log_path)
    return SearchResult(trajectory=trajectory, final=state.arch, log=epoch_logs, state=state)


def write_log_csv(epoch_logs, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["epoch", "L1_train", "L2_train", "L3_train",
             "L1_val", "L2_val", "L3_val", "w1", "w2", "w3"]
        )
        for row in epoch_logs:
            writer.writerow(
                [row.epoch]
                + [f"{v:.6f}" for v in row.losses_train]
                + [f"{v:.6f}" for v in row.losses_val]
                + [f"{v:.6f}" for v in row.loss_weights]
            )


def save_checkpoint(path, state, shuffle_rng):
    """Everything needed to continue a run: parameters, optimizer buffers,
    rate history, and the shuffle RNG state."""
    arrays = {"lam": state.arch.lam.data}
    for name, p in state.net.named_params():
        arrays[f"w/{name}"] = p.data
    for ct, t in state.arch.alpha.items():
        arrays[f"alpha/{ct.name}"] = t.data
    for i, v in enumerate(state.w_opt.velocity):
        if v is not None:
            arrays[f"wvel/{i}"] = v
    for i, m in enumerate(state.alpha_opt.m):
        if m is not None:
            arrays[f"am/{i}"] = m
            arrays[f"av/{i}"] = state.alpha_opt.v[i]
    for i, v in enumerate(state.lam_opt.velocity):
        if v is not None:
            arrays[f"lvel/{i}"] = v
    tracker = state.tracker.state_dict()
    if tracker["smoothed"] is not None:
        arrays["tracker_smoothed"] = tracker["smoothed"]
    meta = {
        "epoch": state.epoch,
        "adam_t": state.alpha_opt.t,
        "config": asdict(state.config),
        "net_config": state.net.config.to_dict(),
        "tracker_beta": tracker["beta"],
        "tracker_zero_guard": tracker["zero_guard"],
        "rng_state": shuffle_rng.bit_generator.state,
    }
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild (SearchState, shuffle_rng) from save_checkpoint output."""
    try:
        z = np.load(path)
    except (ValueError, EOFError, zipfile.BadZipFile) as e:
        raise ConfigurationError(f"{path} is not a search checkpoint: {e}") from e
    with z:
        arrays = {k: z[k] for k in z.files}
    if "meta" not in arrays:
        raise ConfigurationError(f"{path} is not a search checkpoint (no meta entry)")
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    config = SearchConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()
    })
    net_config = SupernetConfig.from_dict(meta["net_config"])
    state = make_search_state(config, net_config, np.random.default_rng(0))
    state.epoch = meta["epoch"]
    for name, p in state.net.named_params():
        p.data[...] = arrays[f"w/{name}"]
    for ct in CellType:
        state.arch.alpha[ct].data[...] = arrays[f"alpha/{ct.name}"]
    state.arch.lam.data[...] = arrays["lam"]
    for i in range(len(state.w_opt.velocity)):
        if f"wvel/{i}" in arrays:
            state.w_opt.velocity[i] = arrays[f"wvel/{i}"].copy()
    for i in range(len(state.alpha_opt.m)):
        if f"am/{i}" in arrays:
            state.alpha_opt.m[i] = arrays[f"am/{i}"].copy()
            state.alpha_opt.v[i] = arrays[f"av/{i}"].copy()
    for i in range(len(state.lam_opt.velocity)):
        if f"lvel/{i}" in arrays:
            state.lam_opt.velocity[i] = arrays[f"lvel/{i}"].copy()
    state.alpha_opt.t = meta["adam_t"]
    state.tracker.load_state_dict({
        "beta": meta["tracker_beta"],
        "zero_guard": meta["tracker_zero_guard"],
        "smoothed": arrays.get("tracker_smoothed"),
    })
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return state, rng
