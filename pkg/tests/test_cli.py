"""Command-line contract: the full pipeline on a tiny dataset plus exit codes.

Commands run in-process through main(argv) so exit codes and artifacts can
be asserted directly; one subprocess test confirms the installed entry
point is wired to the same function.
"""

import io
import json
import subprocess
import sys
from contextlib import redirect_stderr, redirect_stdout

import pytest

from mvnas.cli import main

TINY = {
    "synth": {"num_classes": 4, "train_per_class": 6, "test_per_class": 3,
              "n_views": 2, "resolution": 8, "seed": 7},
    "search": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8},
    "net": {"init_channels": 4},
    "retrain": {"epochs": 2, "init_channels": 4},
}


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        try:
            rc = main(list(argv))
        except SystemExit as e:  # argparse paths
            rc = e.code
    return rc, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run synth -> search -> derive -> cost -> retrain -> eval -> export once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = str(cfg)
    outputs = {}

    steps = {
        "synth": ("synth", "--config", c, "--out", str(root / "data")),
        "search": ("search", "--config", c, "--seed", "3",
                   "--data", str(root / "data" / "train"), "--out", str(root / "run")),
        "derive": ("derive", "--checkpoint", str(root / "run" / "checkpoint.npz"),
                   "--out", str(root / "derived")),
        "cost": ("cost", "--genotype", str(root / "run" / "genotype.json"),
                 "--out", str(root / "costed")),
        "retrain": ("retrain", "--config", c, "--seed", "3",
                    "--genotype", str(root / "run" / "genotype.json"),
                    "--data", str(root / "data" / "train"), "--out", str(root / "model")),
        "eval": ("eval", "--model", str(root / "model" / "model.npz"),
                 "--data", str(root / "data" / "test"), "--out", str(root / "metrics")),
        "export": ("export", "--genotype", str(root / "run" / "genotype.json"),
                   "--format", "dot"),
    }
    for name, argv in steps.items():
        rc, out, err = run_cli(*argv)
        assert rc == 0, f"{name} failed rc={rc}: {err or out}"
        outputs[name] = out
    return root, outputs


class TestPipeline:
    def test_synth_writes_both_splits(self, pipeline):
        root, _ = pipeline
        train_pngs = list((root / "data" / "train").rglob("*.png"))
        test_pngs = list((root / "data" / "test").rglob("*.png"))
        assert len(train_pngs) == 4 * 6 * 2
        assert len(test_pngs) == 4 * 3 * 2

    def test_search_artifacts(self, pipeline):
        root, outputs = pipeline
        run = root / "run"
        assert (run / "checkpoint.npz").exists()
        doc = json.loads((run / "genotype.json").read_text())
        assert set(doc["cells"]) == {"normal", "reduction", "fusion"}
        header = (run / "search_log.csv").read_text().splitlines()[0]
        assert header == "epoch,L1_train,L2_train,L3_train,L1_val,L2_val,L3_val,w1,w2,w3"
        assert "final loss weights" in outputs["search"]

    def test_derive_matches_search_output(self, pipeline):
        root, _ = pipeline
        direct = (root / "run" / "genotype.json").read_text()
        rederived = (root / "derived" / "genotype.json").read_text()
        assert direct == rederived

    def test_cost_report(self, pipeline):
        root, outputs = pipeline
        doc = json.loads((root / "costed" / "cost.json").read_text())
        assert doc["params"] > 0 and doc["macs"] > 0
        assert sum(r["params"] for r in doc["sections"]) == doc["params"]
        assert "params" in outputs["cost"] and "macs" in outputs["cost"]

    def test_retrain_artifacts(self, pipeline):
        root, _ = pipeline
        assert (root / "model" / "model.npz").exists()
        lines = (root / "model" / "retrain_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,L1,L2,L3,total"
        assert len(lines) == 1 + TINY["retrain"]["epochs"]

    def test_eval_metrics(self, pipeline):
        root, outputs = pipeline
        doc = json.loads((root / "metrics" / "metrics.json").read_text())
        for key in ("overall_accuracy", "per_class_accuracy", "mAP", "auc",
                    "params", "macs"):
            assert key in doc
        assert 0.0 <= doc["overall_accuracy"] <= 1.0
        assert "accuracy" in outputs["eval"]

    def test_export_dot_to_stdout(self, pipeline):
        _, outputs = pipeline
        assert outputs["export"].startswith("digraph")

    def test_export_json_round_trips(self, pipeline, tmp_path):
        root, _ = pipeline
        rc, _, _ = run_cli("export", "--genotype", str(root / "run" / "genotype.json"),
                           "--format", "json", "--out", str(tmp_path))
        assert rc == 0
        original = json.loads((root / "run" / "genotype.json").read_text())
        exported = json.loads((tmp_path / "genotype.json").read_text())
        assert original == exported


class TestSeeds:
    def test_two_seed_report(self, tmp_path):
        cfg = tmp_path / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        rc, out, _ = run_cli("seeds", "--n", "2", "--config", str(cfg),
                             "--out", str(tmp_path / "rep"))
        assert rc == 0
        lines = out.splitlines()
        seed_rows = [l for l in lines if l.startswith("seed ")]
        assert len(seed_rows) == 2
        assert any(l.startswith("accuracy: mean") and "spread" in l for l in lines)
        assert any(l.startswith("mAP: mean") for l in lines)
        doc = json.loads((tmp_path / "rep" / "seeds.json").read_text())
        assert [row["seed"] for row in doc] == [0, 1]

    def test_data_without_test_data_rejected(self, tmp_path):
        rc, _, err = run_cli("seeds", "--n", "1", "--data", str(tmp_path))
        assert rc == 1
        assert "--test-data" in err


class TestExitCodes:
    def test_unknown_flag_exits_1_with_usage(self):
        rc, _, err = run_cli("cost", "--genotype", "g.json", "--bogus")
        assert rc == 1
        assert "usage" in err

    def test_missing_command_exits_1(self):
        rc, _, _ = run_cli()
        assert rc == 1

    def test_missing_data_directory_exits_2(self, tmp_path):
        rc, _, err = run_cli("search", "--data", str(tmp_path / "absent"),
                             "--out", str(tmp_path / "o"))
        assert rc == 2

    def test_bad_config_json_exits_1(self, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{nope")
        rc, _, err = run_cli("synth", "--config", str(cfg), "--out", str(tmp_path / "d"))
        assert rc == 1
        assert "not valid JSON" in err

    def test_unknown_config_section_exits_1(self, tmp_path):
        cfg = tmp_path / "extra.json"
        cfg.write_text(json.dumps({"search": {}, "mystery": {}}))
        rc, _, err = run_cli("synth", "--config", str(cfg), "--out", str(tmp_path / "d"))
        assert rc == 1
        assert "mystery" in err

    def test_unknown_config_field_exits_1(self, tmp_path):
        cfg = tmp_path / "field.json"
        cfg.write_text(json.dumps({"synth": {"resolutionn": 8}}))
        rc, _, err = run_cli("synth", "--config", str(cfg), "--out", str(tmp_path / "d"))
        assert rc == 1
        assert "resolutionn" in err

    def test_corrupt_model_exits_1(self, tmp_path):
        junk = tmp_path / "junk.npz"
        junk.write_text("not an archive")
        rc, _, err = run_cli("eval", "--model", str(junk), "--data", str(tmp_path))
        assert rc == 1
        assert "not a saved model" in err

    def test_corrupt_checkpoint_exits_1(self, tmp_path):
        junk = tmp_path / "junk.npz"
        junk.write_text("still not an archive")
        rc, _, err = run_cli("derive", "--checkpoint", str(junk),
                             "--out", str(tmp_path / "o"))
        assert rc == 1
        assert "not a search checkpoint" in err

    def test_missing_genotype_file_exits_2(self, tmp_path):
        rc, _, _ = run_cli("cost", "--genotype", str(tmp_path / "absent.json"))
        assert rc == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mvnas.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "search", "derive", "cost", "retrain", "eval",
                 "export", "seeds"):
        assert name in proc.stdout
