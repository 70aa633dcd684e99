import json

import pytest
import yaml

from mitolora.cli import main
from mitolora.ensemble import read_predictions
from mitolora.manifest import write_manifest
from mitolora.splitter import load_plan

from conftest import make_manifest


def write_config(tmp_path, manifest, **overrides):
    cfg = {
        "manifest": str(manifest),
        "output_dir": str(tmp_path / "run"),
        "backbone": "tiny-test",
        "lora": {"rank": 4},
        "preprocess": {"strategy": "resize"},
        "train": {"max_epochs": 1},
        "split": {"strategy": "random", "k": 3, "seed": 0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def domain_manifest(tmp_path, n_domains, per_domain=2):
    rows = [
        (f"c{d}_{i}", f"img{d}_{i}", i % 2, f"domain{d}") for d in range(n_domains) for i in range(per_domain)
    ]
    return write_manifest(make_manifest(rows), tmp_path / "manifest.csv")


def test_group_split_nine_domains(tmp_path, capsys):
    cfg = write_config(tmp_path, domain_manifest(tmp_path, 9), split={"strategy": "group", "k": 3})
    assert main(["-q", "split", "--config", str(cfg)]) == 0
    plan = load_plan(tmp_path / "run" / "split_plan.json")
    for f in range(3):
        assert len({plan.domain_of[i] for i in plan.fold_images(f)}) == 3
    assert (tmp_path / "run" / "config.yaml").is_file()


def test_random_split_six_images(tmp_path):
    cfg = write_config(tmp_path, domain_manifest(tmp_path, 3))
    assert main(["-q", "split", "--config", str(cfg)]) == 0
    assert load_plan(tmp_path / "run" / "split_plan.json").fold_sizes() == [2, 2, 2]


def test_group_split_with_too_few_domains_fails(tmp_path, capsys):
    cfg = write_config(tmp_path, domain_manifest(tmp_path, 3), split={"strategy": "group", "k": 5})
    assert main(["-q", "split", "--config", str(cfg)]) != 0
    assert "domains" in capsys.readouterr().err


def test_gated_backbone_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("MITOLORA_WEIGHTS_ROOT", raising=False)
    cfg = write_config(tmp_path, domain_manifest(tmp_path, 3), backbone="virchow", split={"k": 2})
    assert main(["-q", "split", "--config", str(cfg)]) == 0
    assert main(["-q", "train", "--config", str(cfg), "--fold", "0"]) == 2
    assert "gated" in capsys.readouterr().err


def test_missing_config_and_manifest(tmp_path):
    assert main(["-q", "split", "--config", str(tmp_path / "none.yaml")]) == 2
    cfg = write_config(tmp_path, tmp_path / "absent.csv")
    assert main(["-q", "split", "--config", str(cfg)]) == 2


def test_train_requires_plan(tmp_path):
    cfg = write_config(tmp_path, domain_manifest(tmp_path, 3))
    assert main(["-q", "train", "--config", str(cfg)]) == 2


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """A quick 3-fold run on 40 synthetic crops (one epoch per fold)."""
    root = tmp_path_factory.mktemp("cli_run")
    assert main(["-q", "synth", "--out", str(root / "data"), "-n", "40", "--domains", "2"]) == 0
    cfg = write_config(root, root / "data" / "manifest.csv")
    assert main(["-q", "split", "--config", str(cfg)]) == 0
    assert main(["-q", "train", "--config", str(cfg)]) == 0
    return root, cfg


def test_train_writes_checkpoints_and_logs(trained_run):
    root, _ = trained_run
    for f in range(3):
        assert (root / "run" / f"fold{f}" / "checkpoint.safetensors").is_file()
        log = (root / "run" / f"fold{f}" / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 1 and json.loads(log[0])["epoch"] == 1


def test_evaluate_reports_both_thresholds(trained_run):
    root, cfg = trained_run
    assert main(["-q", "evaluate", "--config", str(cfg), "--threshold", "0.5", "--threshold", "0.6"]) == 0
    ev = json.loads((root / "run" / "evaluation.json").read_text())
    reported = {r["threshold"] for r in ev["reports"]}
    assert {0.5, 0.6} <= reported
    assert ev["selected_threshold"] in reported
    assert len(ev["sweep"]) == 9
    for rep in ev["reports"]:
        names = [row["name"] for row in rep["rows"]]
        assert names == ["domain0", "domain1", "Overall"]
        for row in rep["rows"]:
            if row["balanced_accuracy"] is not None:
                assert row["balanced_accuracy"] == (row["sensitivity"] + row["specificity"]) / 2
    assert main(["-q", "report", str(root / "run"), "--domains", "--out", str(root / "summary.txt")]) == 0
    assert "tiny-test" in (root / "summary.txt").read_text()


def test_predict_three_members_ten_images(trained_run, tmp_path):
    root, _ = trained_run
    images = tmp_path / "imgs"
    images.mkdir()
    for p in sorted((root / "data" / "crops").glob("*.png"))[:10]:
        (images / p.name).write_bytes(p.read_bytes())
    ckpts = [str(root / "run" / f"fold{f}" / "checkpoint.safetensors") for f in range(3)]
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["-q", "predict", "--checkpoints", *ckpts, "--images", str(images), "--threshold", "0.6", "--out", str(out1)]) == 0
    assert main(["-q", "predict", "--checkpoints", *ckpts, "--images", str(images), "--threshold", "0.6", "--out", str(out2)]) == 0
    recs = read_predictions(out1)
    assert len(recs) == 10 and all(len(r.member_probs) == 3 for r in recs)
    assert out1.read_bytes() == out2.read_bytes()


def test_single_checkpoint_ensemble_is_the_member(trained_run, tmp_path):
    root, _ = trained_run
    out = tmp_path / "single.csv"
    ckpt = str(root / "run" / "fold1" / "checkpoint.safetensors")
    assert main(["-q", "predict", "--checkpoints", ckpt, "--images", str(root / "data" / "manifest.csv"), "--out", str(out)]) == 0
    recs = read_predictions(out)
    assert len(recs) == 40
    assert all(r.prob == r.member_probs[0] for r in recs)
