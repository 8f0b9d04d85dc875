"""Retrieval metrics against a brute-force reference, retraining behaviour,
and persistence of trained models."""

import numpy as np
import pytest

from mvnas.data import SynthConfig, synth_generate
from mvnas.errors import ConfigurationError
from mvnas.evaluate import (
    RetrainConfig,
    average_precision,
    evaluate,
    load_model,
    retrain,
    retrieval_metrics,
    save_model,
)
from mvnas.genotype import random_genotype
from mvnas.supernet import DiscreteNetwork, SupernetConfig


def reference_retrieval(desc, labels, g_desc=None, g_labels=None):
    """Textbook AP/PR-AUC with explicit loops and no shared code: rank by
    cosine similarity (stable on ties), precision at each relevant rank,
    trapezoidal PR integration from the (0, 1) anchor."""
    self_match = g_desc is None
    if self_match:
        g_desc, g_labels = desc, labels
    aps, aucs = [], []
    for q in range(len(labels)):
        entries = []
        for g in range(len(g_labels)):
            if self_match and g == q:
                continue
            sim = float(np.dot(desc[q], g_desc[g]))
            entries.append((sim, g))
        # stable descending sort on similarity
        entries = sorted(entries, key=lambda t: t[1])
        entries = sorted(entries, key=lambda t: -t[0])
        rel = [1 if g_labels[g] == labels[q] else 0 for _, g in entries]
        n_rel = sum(rel)
        if n_rel == 0:
            continue
        hits = 0
        precisions = []
        curve = [(0.0, 1.0)]
        for rank, r in enumerate(rel, start=1):
            hits += r
            p = hits / rank
            if r:
                precisions.append(p)
            curve.append((hits / n_rel, p))
        aps.append(sum(precisions) / n_rel)
        auc = 0.0
        for (r0, p0), (r1, p1) in zip(curve, curve[1:]):
            auc += (r1 - r0) * (p0 + p1) / 2.0
        aucs.append(auc)
    return float(np.mean(aps)), float(np.mean(aucs))


def random_descriptor_set(rng, n=None, dim=None, classes=None):
    n = n or int(rng.integers(4, 20))
    dim = dim or int(rng.integers(2, 10))
    classes = classes or int(rng.integers(2, 5))
    desc = rng.normal(size=(n, dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    # ensure at least two members somewhere so something is evaluable
    labels[0] = labels[1] = 0
    return desc, labels


class TestAveragePrecision:
    def test_hand_example(self):
        # ranked relevance [1, 0, 1] with 2 relevant:
        # precision at relevant ranks: 1/1, 2/3 -> AP = 0.8333...
        ap, _ = average_precision([True, False, True], 2)
        assert ap == pytest.approx(0.833333, abs=1e-5)

    def test_perfect_ranking(self):
        ap, auc = average_precision([True, True, False, False], 2)
        assert ap == 1.0
        assert auc == pytest.approx(1.0)

    def test_worst_ranking(self):
        ap, _ = average_precision([False, False, True], 1)
        assert ap == pytest.approx(1 / 3)


class TestRetrievalOracle:
    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            desc, labels = random_descriptor_set(rng)
            got_map, got_auc, skipped = retrieval_metrics(desc, labels)
            want_map, want_auc = reference_retrieval(desc, labels)
            assert got_map == pytest.approx(want_map, abs=1e-10), f"trial {trial}"
            assert got_auc == pytest.approx(want_auc, abs=1e-10), f"trial {trial}"

    def test_explicit_gallery_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            dim = int(rng.integers(2, 10))
            desc, labels = random_descriptor_set(rng, dim=dim)
            g_desc, g_labels = random_descriptor_set(rng, dim=dim)
            g_labels[:2] = labels[0]  # guarantee evaluable queries
            got = retrieval_metrics(desc, labels, g_desc, g_labels)[:2]
            want = reference_retrieval(desc, labels, g_desc, g_labels)
            assert got[0] == pytest.approx(want[0], abs=1e-10)
            assert got[1] == pytest.approx(want[1], abs=1e-10)

    def test_one_hot_descriptors_are_perfect(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        desc = np.eye(3)[labels]
        m, auc, skipped = retrieval_metrics(desc, labels)
        assert m == pytest.approx(1.0)
        assert skipped == 0

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(2)
        desc, labels = random_descriptor_set(rng, n=12, dim=6)
        g_desc, g_labels = random_descriptor_set(rng, n=15, dim=6)
        g_labels[:3] = labels[0]
        base = retrieval_metrics(desc, labels, g_desc, g_labels)
        perm = rng.permutation(len(g_labels))
        again = retrieval_metrics(desc, labels, g_desc[perm], g_labels[perm])
        assert base[0] == pytest.approx(again[0], abs=1e-12)
        assert base[1] == pytest.approx(again[1], abs=1e-12)

    def test_absent_class_skipped_with_warning(self):
        desc = np.eye(3)
        labels = np.array([0, 0, 2])  # class 2 has one member: its own query
        with pytest.warns(UserWarning, match="no gallery"):
            m, _, skipped = retrieval_metrics(desc, labels)
        assert skipped == 1
        assert m == pytest.approx(1.0)

    def test_all_queries_skipped_raises(self):
        desc = np.eye(2)
        labels = np.array([0, 1])
        with pytest.warns(UserWarning):
            with pytest.raises(ConfigurationError):
                retrieval_metrics(desc, labels)


@pytest.fixture(scope="module")
def tiny_setup():
    cfg = SynthConfig(num_classes=4, train_per_class=6, test_per_class=3,
                      n_views=2, resolution=8, seed=2)
    train, test = synth_generate(cfg)
    net_cfg = SupernetConfig(n_views=2, init_channels=4, num_classes=4,
                             input_resolution=8)
    geno = random_genotype(np.random.default_rng(0), net_cfg)
    return train, test, net_cfg, geno


class TestRetrain:
    def test_loss_decreases_across_seeds(self, tiny_setup):
        train, _, _, geno = tiny_setup
        for seed in range(3):
            cfg = RetrainConfig(epochs=3, batch_size=8, init_channels=4, seed=seed)
            _, log = retrain(geno, train, cfg)
            assert log[-1].total < log[0].total, f"seed {seed}"

    def test_zero_epochs_gives_chance_level(self, tiny_setup):
        train, test, _, geno = tiny_setup
        cfg = RetrainConfig(epochs=0, batch_size=8, init_channels=4, seed=0)
        net, log = retrain(geno, train, cfg)
        assert log == []
        report = evaluate(net, test, seed=0)
        # untrained: accuracy should be near 1/4, certainly below 3/4
        assert report.overall_accuracy < 0.75

    def test_deterministic(self, tiny_setup):
        train, test, _, geno = tiny_setup
        cfg = RetrainConfig(epochs=2, batch_size=8, init_channels=4, seed=1)
        net_a, _ = retrain(geno, train, cfg)
        net_b, _ = retrain(geno, train, cfg)
        for (na, pa), (nb, pb) in zip(net_a.named_params(), net_b.named_params()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        ra = evaluate(net_a, test, seed=1)
        rb = evaluate(net_b, test, seed=1)
        assert ra.overall_accuracy == rb.overall_accuracy
        assert ra.mAP == rb.mAP

    def test_cosine_schedule_ends_near_zero_lr(self, tiny_setup):
        train, _, _, geno = tiny_setup
        cfg = RetrainConfig(epochs=2, batch_size=8, init_channels=4, seed=0,
                            lr_schedule="cosine")
        net_cos, _ = retrain(geno, train, cfg)
        net_const, _ = retrain(geno, train, RetrainConfig(
            epochs=2, batch_size=8, init_channels=4, seed=0))
        # schedules genuinely differ
        assert any(
            not np.array_equal(a.data, b.data)
            for (_, a), (_, b) in zip(net_cos.named_params(), net_const.named_params())
        )

    def test_loss_weights_change_training(self, tiny_setup):
        train, _, _, geno = tiny_setup
        a, _ = retrain(geno, train, RetrainConfig(
            epochs=1, batch_size=8, init_channels=4, seed=0,
            loss_weights=(1.0, 0.0, 0.0)))
        b, _ = retrain(geno, train, RetrainConfig(
            epochs=1, batch_size=8, init_channels=4, seed=0,
            loss_weights=(1.0, 2.0, 0.1)))
        assert any(
            not np.array_equal(pa.data, pb.data)
            for (_, pa), (_, pb) in zip(a.named_params(), b.named_params())
        )

    def test_dataset_mismatch_rejected(self, tiny_setup):
        train, _, _, geno = tiny_setup
        other, _ = synth_generate(SynthConfig(
            num_classes=4, train_per_class=2, test_per_class=1,
            n_views=4, resolution=8, seed=0))
        with pytest.raises(ConfigurationError):
            retrain(geno, other, RetrainConfig(epochs=1, init_channels=4))

    def test_weight_config_validation(self):
        with pytest.raises(ConfigurationError):
            RetrainConfig(loss_weights=(2.0, 1.0, 1.0))
        with pytest.raises(ConfigurationError):
            RetrainConfig(lr_schedule="linear")


class TestEvaluateReport:
    def test_report_fields_and_ranges(self, tiny_setup):
        train, test, _, geno = tiny_setup
        cfg = RetrainConfig(epochs=1, batch_size=8, init_channels=4, seed=0)
        net, _ = retrain(geno, train, cfg)
        rep = evaluate(net, test, genotype_json="{}", seed=0)
        for v in (rep.overall_accuracy, rep.per_class_accuracy, rep.mAP, rep.auc):
            assert 0.0 <= v <= 1.0
        assert rep.params > 0 and rep.macs > 0
        table = rep.format_table()
        assert "mAP" in table and f"{rep.params:,}" in table

    def test_params_macs_match_cost_module(self, tiny_setup):
        from mvnas.cost import network_cost

        train, test, _, geno = tiny_setup
        net, _ = retrain(geno, train, RetrainConfig(
            epochs=0, batch_size=8, init_channels=4, seed=0))
        rep = evaluate(net, test, seed=0)
        cost = network_cost(net)
        assert rep.params == cost.params
        assert rep.macs == cost.macs


class TestModelPersistence:
    def test_round_trip_reproduces_metrics(self, tiny_setup, tmp_path):
        train, test, _, geno = tiny_setup
        cfg = RetrainConfig(epochs=2, batch_size=8, init_channels=4, seed=3)
        net, _ = retrain(geno, train, cfg)
        before = evaluate(net, test, seed=3)
        save_model(tmp_path / "m.npz", net, geno, 3)
        loaded, genotype_json, seed = load_model(tmp_path / "m.npz")
        assert seed == 3
        after = evaluate(loaded, test, genotype_json=genotype_json, seed=seed)
        assert after.overall_accuracy == before.overall_accuracy
        assert after.mAP == before.mAP
        assert after.auc == before.auc

    def test_rejects_non_model_file(self, tiny_setup, tmp_path):
        np.savez(tmp_path / "junk.npz", a=np.ones(3))
        with pytest.raises(ConfigurationError):
            load_model(tmp_path / "junk.npz")
