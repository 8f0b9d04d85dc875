"""Multi-view datasets: a procedural silhouette generator, a directory
loader for pre-rendered views, the stratified train/val split, and batch
iteration.

The synthetic task renders 2-D silhouette families as N_v grayscale views
per shape, where view v sees the silhouette rotated by 2*pi*v/N_v on top of
a random per-sample pose. Classes are telling only through shape: size,
orientation, and brightness vary freely within every class.
"""

import math
from pathlib import Path
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import ConfigurationError, ValidationError
from .supernet import ViewBatch

__all__ = [
    "SynthConfig",
    "MultiViewSample",
    "MultiViewDataset",
    "synth_generate",
    "export_directory",
    "load_directory",
    "split_train_val",
    "make_batch",
    "iter_batches",
]

_SUPERSAMPLE = 2  # subpixel grid per axis for antialiased rasterization


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    train_per_class: int = 30
    test_per_class: int = 10
    n_views: int = 4
    resolution: int = 16
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(_FAMILIES):
            raise ConfigurationError(
                f"num_classes must be in [2, {len(_FAMILIES)}], got {self.num_classes}"
            )
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("samples per class must be at least 1")
        if self.n_views < 2:
            raise ConfigurationError(f"n_views must be at least 2, got {self.n_views}")
        if self.resolution < 8:
            raise ConfigurationError(f"resolution must be at least 8, got {self.resolution}")
        if self.noise_sigma < 0.0:
            raise ConfigurationError(f"noise_sigma must be non-negative, got {self.noise_sigma}")


@dataclass(frozen=True)
class MultiViewSample:
    shape_id: str
    class_label: int
    views: np.ndarray  # [N_v, 1, H, W], values in [0, 1]

    def __post_init__(self):
        v = self.views
        if v.ndim != 4 or v.shape[1] != 1:
            raise ValidationError(f"views must be [N_v, 1, H, W], got {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError(
                f"shape {self.shape_id}: pixel values outside [0, 1] "
                f"(range [{v.min():.4g}, {v.max():.4g}])"
            )


class MultiViewDataset:
    """An immutable collection of samples sharing N_v and resolution."""

    def __init__(self, samples, class_names):
        samples = tuple(samples)
        if not samples:
            raise ConfigurationError("dataset must contain at least one sample")
        self.samples = samples
        self.class_names = tuple(class_names)
        self.n_views = samples[0].views.shape[0]
        self.resolution = samples[0].views.shape[-1]
        for s in samples:
            if s.views.shape != samples[0].views.shape:
                raise ValidationError(
                    f"shape {s.shape_id}: views {s.views.shape} differ from "
                    f"{samples[0].views.shape}"
                )
            if not 0 <= s.class_label < len(self.class_names):
                raise ValidationError(
                    f"shape {s.shape_id}: label {s.class_label} outside "
                    f"[0, {len(self.class_names)})"
                )
        self.labels = np.array([s.class_label for s in samples], dtype=np.int64)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices):
        return MultiViewDataset([self.samples[i] for i in indices], self.class_names)


# --- silhouette families ----------------------------------------------------
#
# Each family draws its latents and returns (indicator, radius_factor): the
# indicator maps canonical coordinates (u, v) at unit scale s to a boolean
# mask, and radius_factor bounds the silhouette's extent in units of s so
# the caller can inscribe it in the unit circle (never cropped, whatever
# the rotation).


def _ellipse(rng):
    # eccentric enough to read as oval rather than blob at 16 px, and more
    # than twice as thick as the thickest bar so the two never meet
    q = rng.uniform(0.40, 0.58)

    def ind(u, v, s):
        return (u / s) ** 2 + (v / (q * s)) ** 2 <= 1.0

    return ind, 1.0


def _rectangle(rng):
    q = rng.uniform(0.60, 0.90)

    def ind(u, v, s):
        return (np.abs(u) <= s) & (np.abs(v) <= q * s)

    return ind, math.sqrt(1.0 + q * q)


def _cross(rng):
    q = rng.uniform(0.16, 0.26)

    def ind(u, v, s):
        t = q * s
        au, av = np.abs(u), np.abs(v)
        return ((au <= t) & (av <= s)) | ((av <= t) & (au <= s))

    return ind, math.sqrt(1.0 + q * q)


def _ring(rng):
    q = rng.uniform(0.45, 0.62)

    def ind(u, v, s):
        r2 = u * u + v * v
        return (r2 >= (q * s) ** 2) & (r2 <= s * s)

    return ind, 1.0


def _triangle(rng):
    w = rng.uniform(0.55, 0.80)
    h = rng.uniform(0.50, 0.70)

    def ind(u, v, s):
        # vertices (0, s), (-ws, -hs), (ws, -hs) in counterclockwise order;
        # inside iff left of all three directed edges
        ax, ay = 0.0, s
        bx, by = -w * s, -h * s
        cx, cy = w * s, -h * s
        d1 = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        d2 = (cx - bx) * (v - by) - (cy - by) * (u - bx)
        d3 = (ax - cx) * (v - cy) - (ay - cy) * (u - cx)
        return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)

    return ind, max(1.0, math.sqrt(w * w + h * h))


def _l_shape(rng):
    q = rng.uniform(0.30, 0.42)

    def ind(u, v, s):
        t = 2.0 * q * s
        inside = (np.abs(u) <= s) & (np.abs(v) <= s)
        return inside & ((u <= -s + t) | (v <= -s + t))

    return ind, math.sqrt(2.0)


def _bar(rng):
    q = rng.uniform(0.12, 0.19)

    def ind(u, v, s):
        return (np.abs(u) <= s) & (np.abs(v) <= q * s)

    return ind, math.sqrt(1.0 + q * q)


def _dot_grid(rng):
    # 2x2 dots large enough to survive 16-px rendering as solid blobs; a
    # 3x3 grid over-normalizes and leaves each dot a 1-px smudge
    q = rng.uniform(0.34, 0.44)

    def ind(u, v, s):
        d, r = 0.58 * s, q * s
        hit = np.zeros(u.shape, dtype=bool)
        for cx in (-d, d):
            for cy in (-d, d):
                hit |= (u - cx) ** 2 + (v - cy) ** 2 <= r * r
        return hit

    return ind, 0.58 * math.sqrt(2.0) + q


_FAMILIES = (
    ("ellipse", _ellipse),
    ("rectangle", _rectangle),
    ("cross", _cross),
    ("ring", _ring),
    ("triangle", _triangle),
    ("l_shape", _l_shape),
    ("bar", _bar),
    ("dot_grid", _dot_grid),
)


def _render_sample(family, shape_id, label, config, rng):
    indicator, factor = family(rng)
    # keep figures large on the canvas: at 16 px the thin and dotted families
    # stop being recognizable below roughly two thirds of the frame
    s = rng.uniform(0.68, 0.88) / factor
    phi = rng.uniform(0.0, 2.0 * math.pi)
    fill = rng.uniform(0.75, 1.0)

    res = config.resolution
    n = res * _SUPERSAMPLE
    axis = (np.arange(n) + 0.5) * (2.0 / n) - 1.0
    X, Y = np.meshgrid(axis, axis)

    views = np.empty((config.n_views, 1, res, res))
    for v in range(config.n_views):
        theta = phi + 2.0 * math.pi * v / config.n_views
        c, si = math.cos(theta), math.sin(theta)
        mask = indicator(c * X + si * Y, -si * X + c * Y, s)
        cover = mask.reshape(res, _SUPERSAMPLE, res, _SUPERSAMPLE).mean(axis=(1, 3))
        views[v, 0] = fill * cover
    views += rng.normal(0.0, config.noise_sigma, size=views.shape)
    np.clip(views, 0.0, 1.0, out=views)
    return MultiViewSample(shape_id=shape_id, class_label=label, views=views)


def synth_generate(config):
    """Render (train set, test set); bitwise-deterministic under the seed."""
    rng = np.random.default_rng(config.seed)
    families = _FAMILIES[: config.num_classes]
    class_names = tuple(name for name, _ in families)
    sets = []
    for tag, per_class in (("train", config.train_per_class), ("test", config.test_per_class)):
        samples = []
        for label, (name, family) in enumerate(families):
            for i in range(per_class):
                samples.append(
                    _render_sample(family, f"{name}_{tag}{i:03d}", label, config, rng)
                )
        sets.append(MultiViewDataset(samples, class_names))
    return sets[0], sets[1]


# --- directory persistence ---------------------------------------------------


def export_directory(dataset, root):
    """Write root/<class_name>/<shape_id>_<view>.png as 8-bit grayscale."""
    root = Path(root)
    for sample in dataset.samples:
        class_dir = root / dataset.class_names[sample.class_label]
        class_dir.mkdir(parents=True, exist_ok=True)
        for v in range(dataset.n_views):
            img = np.round(sample.views[v, 0] * 255.0).astype(np.uint8)
            Image.fromarray(img, mode="L").save(class_dir / f"{sample.shape_id}_{v}.png")
    return root


def _read_image(path, resolution):
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            w, h = img.size
            if w != h:
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                img = img.crop((left, top, left + side, top + side))
            if resolution is not None and img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except OSError as e:
        raise OSError(f"failed to read image {path}: {e}") from e


def load_directory(root, resolution=None):
    """Load root/<class_name>/<shape_id>_<view_index>.<png|ppm> as a dataset.

    Every shape must provide views 0..N_v-1 for one dataset-wide N_v; images
    are decoded to grayscale in [0, 1] and, when a resolution is given,
    center-cropped square and resized.
    """
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValidationError(f"no class directories under {root}")
    class_names = tuple(d.name for d in class_dirs)

    samples = []
    n_views = None
    for label, class_dir in enumerate(class_dirs):
        by_shape = {}
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in (".png", ".ppm"):
                continue
            stem, _, view_str = path.stem.rpartition("_")
            if not stem or not view_str.isdigit():
                raise ValidationError(
                    f"file {path.name} does not match <shape_id>_<view_index>{path.suffix}"
                )
            by_shape.setdefault(stem, {})[int(view_str)] = path
        if not by_shape:
            raise ValidationError(f"class directory {class_dir} contains no images")
        for shape_id in sorted(by_shape):
            views = by_shape[shape_id]
            if n_views is None:
                n_views = max(views) + 1
            if sorted(views) != list(range(n_views)):
                raise ValidationError(
                    f"shape {shape_id} has views {sorted(views)}, expected 0..{n_views - 1}"
                )
            stack = np.stack([_read_image(views[v], resolution) for v in range(n_views)])
            samples.append(
                MultiViewSample(
                    shape_id=shape_id, class_label=label, views=stack[:, None, :, :]
                )
            )
    return MultiViewDataset(samples, class_names)


# --- splitting and batching --------------------------------------------------


def split_train_val(dataset, fraction=0.5, seed=0):
    """Class-stratified disjoint split; round(fraction * n) per class to val."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in range(len(dataset.class_names)):
        idx = np.flatnonzero(dataset.labels == label)
        if idx.size < 2:
            raise ConfigurationError(
                f"class {dataset.class_names[label]} has {idx.size} sample(s); "
                f"need at least 2 to split"
            )
        idx = rng.permutation(idx)
        n_val = round(fraction * idx.size)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


def make_batch(dataset, indices):
    images = np.stack([dataset.samples[i].views for i in indices])
    return ViewBatch(images=Tensor(images), labels=dataset.labels[list(indices)])


def iter_batches(dataset, batch_size, rng=None, shuffle=True, drop_last=False):
    """Yield ViewBatches; ordering is deterministic given the caller's rng."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ConfigurationError("shuffling requires an rng for determinism")
        order = rng.permutation(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if drop_last and chunk.size < batch_size:
            break
        yield make_batch(dataset, chunk)
