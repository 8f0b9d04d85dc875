"""Synthetic multi-view rendering, disk round-trips, splits, and batching."""

import numpy as np
import pytest

from mvnas.data import (
    MultiViewDataset,
    MultiViewSample,
    SynthConfig,
    export_directory,
    iter_batches,
    load_directory,
    make_batch,
    split_train_val,
    synth_generate,
)
from mvnas.errors import ConfigurationError, ValidationError


@pytest.fixture(scope="module")
def small_sets():
    cfg = SynthConfig(num_classes=4, train_per_class=6, test_per_class=3,
                      n_views=3, resolution=12, seed=11)
    return synth_generate(cfg)


class TestSynth:
    def test_counts_and_shapes(self, small_sets):
        train, test = small_sets
        assert len(train) == 24 and len(test) == 12
        assert train.n_views == 3 and train.resolution == 12
        s = train.samples[0]
        assert s.views.shape == (3, 1, 12, 12)
        assert s.views.dtype == np.float64

    def test_deterministic(self, small_sets):
        train, _ = small_sets
        cfg = SynthConfig(num_classes=4, train_per_class=6, test_per_class=3,
                          n_views=3, resolution=12, seed=11)
        again, _ = synth_generate(cfg)
        for a, b in zip(train.samples, again.samples):
            assert a.shape_id == b.shape_id
            np.testing.assert_array_equal(a.views, b.views)

    def test_seed_changes_pixels(self, small_sets):
        train, _ = small_sets
        other, _ = synth_generate(SynthConfig(num_classes=4, train_per_class=6,
                                              test_per_class=3, n_views=3,
                                              resolution=12, seed=12))
        assert any(
            not np.array_equal(a.views, b.views)
            for a, b in zip(train.samples, other.samples)
        )

    def test_pixel_range(self, small_sets):
        train, test = small_sets
        for ds in (train, test):
            for s in ds.samples:
                assert s.views.min() >= 0.0 and s.views.max() <= 1.0

    def test_views_of_round_shapes_differ_only_by_noise(self):
        # rings are rotation invariant, so any two views of one ring differ
        # by the additive noise alone: E[(a-b)^2] = 2 sigma^2 < 4 sigma^2
        cfg = SynthConfig(num_classes=8, train_per_class=8, test_per_class=1,
                          n_views=4, resolution=16, noise_sigma=0.05, seed=0)
        train, _ = synth_generate(cfg)
        rings = [s for s in train.samples if s.class_label == train.class_names.index("ring")]
        assert rings
        bound = 4.0 * cfg.noise_sigma**2
        for s in rings:
            for v in range(1, cfg.n_views):
                mse = float(np.mean((s.views[0] - s.views[v]) ** 2))
                assert mse < bound

    def test_shapes_fill_the_frame(self, small_sets):
        # every rendered shape has real foreground: enough lit pixels to
        # be visible at this resolution even after noise
        train, _ = small_sets
        for s in train.samples:
            lit = (s.views > 0.5).mean()
            assert lit > 0.02, f"{s.shape_id} is nearly empty"

    def test_classes_differ(self, small_sets):
        # noise-free class prototypes must not collapse onto one another:
        # compare per-class mean images across the train set
        train, _ = small_sets
        means = []
        for c in range(len(train.class_names)):
            views = np.stack([s.views for s in train.samples if s.class_label == c])
            means.append(views.mean(axis=(0, 1)))
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert float(np.mean((means[i] - means[j]) ** 2)) > 1e-4

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            SynthConfig(num_classes=9)
        with pytest.raises(ConfigurationError):
            SynthConfig(n_views=1)
        with pytest.raises(ConfigurationError):
            SynthConfig(resolution=4)


class TestDiskRoundTrip:
    def test_quantization_bound(self, small_sets, tmp_path):
        train, _ = small_sets
        export_directory(train, tmp_path / "train")
        loaded = load_directory(tmp_path / "train")
        # loading sorts class names; the synthetic set keeps family order
        assert set(loaded.class_names) == set(train.class_names)
        by_id = {s.shape_id: s for s in loaded.samples}
        assert set(by_id) == {s.shape_id for s in train.samples}
        for s in train.samples:
            twin = by_id[s.shape_id]
            assert loaded.class_names[twin.class_label] == train.class_names[s.class_label]
            err = np.abs(twin.views - s.views).max()
            assert err <= 0.5 / 255 + 1e-12

    def test_resize_on_load(self, small_sets, tmp_path):
        train, _ = small_sets
        export_directory(train, tmp_path / "t")
        loaded = load_directory(tmp_path / "t", resolution=8)
        assert loaded.resolution == 8
        assert loaded.samples[0].views.shape == (3, 1, 8, 8)

    def test_missing_view_names_the_shape(self, small_sets, tmp_path):
        train, _ = small_sets
        export_directory(train, tmp_path / "t")
        victim = sorted((tmp_path / "t").rglob("*_1.png"))[0]
        victim.unlink()
        shape_id = victim.name.rpartition("_")[0]
        with pytest.raises(ValidationError, match=shape_id):
            load_directory(tmp_path / "t")

    def test_missing_root(self, tmp_path):
        with pytest.raises(OSError):
            load_directory(tmp_path / "nope")


class TestSplit:
    def test_partition_and_stratification(self, small_sets):
        train, _ = small_sets
        half_a, half_b = split_train_val(train, fraction=0.5, seed=3)
        ids_a = {s.shape_id for s in half_a.samples}
        ids_b = {s.shape_id for s in half_b.samples}
        assert not ids_a & ids_b
        assert ids_a | ids_b == {s.shape_id for s in train.samples}
        for c in range(len(train.class_names)):
            na = sum(1 for s in half_a.samples if s.class_label == c)
            nb = sum(1 for s in half_b.samples if s.class_label == c)
            assert na == nb == 3

    def test_split_seed_determinism(self, small_sets):
        train, _ = small_sets
        a1, _ = split_train_val(train, seed=5)
        a2, _ = split_train_val(train, seed=5)
        assert [s.shape_id for s in a1.samples] == [s.shape_id for s in a2.samples]
        b1, _ = split_train_val(train, seed=6)
        assert [s.shape_id for s in a1.samples] != [s.shape_id for s in b1.samples]

    def test_single_sample_class_rejected(self):
        views = np.zeros((2, 1, 8, 8))
        ds = MultiViewDataset(
            samples=(
                MultiViewSample("a_0", 0, views),
                MultiViewSample("a_1", 0, views),
                MultiViewSample("b_0", 1, views),
            ),
            class_names=("a", "b"),
        )
        with pytest.raises(ConfigurationError, match="b"):
            split_train_val(ds, fraction=0.5, seed=0)


class TestBatching:
    def test_make_batch_layout(self, small_sets):
        train, _ = small_sets
        batch = make_batch(train, range(5))
        assert batch.images.data.shape == (5, 3, 1, 12, 12)
        assert batch.labels.shape == (5,)
        assert batch.labels.dtype.kind == "i"

    def test_epoch_covers_everything_once(self, small_sets):
        train, _ = small_sets
        rng = np.random.default_rng(0)
        seen = []
        for batch in iter_batches(train, 7, rng=rng):
            seen.extend(batch.labels.tolist())
            assert batch.labels.shape[0] <= 7
        assert len(seen) == len(train)
        assert sorted(seen) == sorted(s.class_label for s in train.samples)

    def test_shuffle_orders_differ_by_rng(self, small_sets):
        train, _ = small_sets
        def order(seed):
            rng = np.random.default_rng(seed)
            return [tuple(b.labels) for b in iter_batches(train, 6, rng=rng)]
        assert order(1) != order(2)
        assert order(3) == order(3)

    def test_drop_last(self, small_sets):
        train, _ = small_sets  # 24 samples
        batches = list(iter_batches(train, 7, shuffle=False, drop_last=True))
        assert [b.labels.shape[0] for b in batches] == [7, 7, 7]

    def test_shuffle_needs_rng(self, small_sets):
        train, _ = small_sets
        with pytest.raises(ConfigurationError):
            next(iter_batches(train, 4))

    def test_sequential_when_not_shuffled(self, small_sets):
        train, _ = small_sets
        batches = list(iter_batches(train, 24, shuffle=False))
        assert len(batches) == 1
        np.testing.assert_array_equal(
            batches[0].labels, [s.class_label for s in train.samples]
        )
