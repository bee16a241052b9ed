import json
import os
from pathlib import Path

import numpy as np
import pytest

from uqeval import experiment as exp
from uqeval.cli import main
from uqeval.errors import LineageError
from uqeval.estimators import read_manifest, write_manifest

DATA_DIR = Path(__file__).parent / "data"


def _config(root, **ensemble):
    ens = {
        "method": "ensemble",
        "members": 3,
        "hidden": [8],
        "train": {"max_epochs": 15, "patience": 5, "batch_size": 32},
    }
    ens.update(ensemble)
    return {
        "data": {"path": "synthetic.csv", "target": "y", "group": "group"},
        "split": {"fractions": [0.7, 0.15, 0.15], "strategy": "random", "seed": 1},
        "ensemble": ens,
        "ranking": {"q": 10},
        "calibration": {"levels": 20, "bins": 5},
        "out_dir": "run",
        "seed": 3,
    }


def _write_config(root, name="config.json", **ensemble):
    path = Path(root) / name
    path.write_text(json.dumps(_config(root, **ensemble)))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert main(["synth", "--out", str(root), "--n", "400", "--groups", "clusters", "--n-groups", "12", "--seed", "5"]) == 0
    cfg = _write_config(root)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 0
    return root, cfg


def test_synth_outputs(workspace):
    root, _ = workspace
    header = (root / "synthetic.csv").read_text().splitlines()[0]
    assert header == "x1,x2,y,group"
    assert len((root / "true_sigma.csv").read_text().splitlines()) == 401


def test_train_writes_checkpoints_and_manifest(workspace):
    root, _ = workspace
    run = root / "run"
    assert sorted(p.name for p in (run / "models").iterdir()) == [f"member_00{k}.ckpt" for k in range(3)]
    manifest = json.loads((run / "manifest.json").read_text())
    assert len(manifest["members"]) == 3 and manifest["method"] == "ensemble"
    for name in ("config.resolved.json", "split.json", "history.json"):
        assert (run / name).exists()


def test_retraining_reproduces_manifest(workspace, tmp_path):
    root, cfg = workspace
    first = (root / "run" / "manifest.json").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == first


def test_evaluate_leaves_checkpoints_untouched(workspace):
    root, cfg = workspace
    ckpts = sorted((root / "run" / "models").iterdir())
    before = [(p.read_bytes(), p.stat().st_mtime_ns) for p in ckpts]
    manifest_before = (root / "run" / "manifest.json").read_bytes()
    assert main(["evaluate", "--config", str(cfg), "--uncertainty", "epi"]) == 0
    assert [(p.read_bytes(), p.stat().st_mtime_ns) for p in ckpts] == before
    assert (root / "run" / "manifest.json").read_bytes() == manifest_before


def test_summary_shape_and_exports(workspace):
    root, _ = workspace
    run = root / "run"
    doc = json.loads((run / "summary.json").read_text())
    assert doc["format"] == exp.SUMMARY_FORMAT
    assert set(doc["metrics"]) == set(exp.KINDS)
    for kind in exp.KINDS:
        assert list(doc["metrics"][kind]) == list(exp.INDICES)
    assert isinstance(doc["mae"], float)
    assert doc["domain"] == "in"
    for kind in exp.KINDS:
        assert (run / f"confidence_curve_{kind}.csv").exists()
        assert (run / f"calibration_confidence_{kind}.csv").exists()
        assert (run / f"calibration_error_{kind}.csv").exists()
    preds = (run / "predictions.csv").read_text().splitlines()
    assert preds[0] == "index,y_true,y_pred,var_ale,var_epi,var_total"
    assert len(preds) == 1 + doc["n_test"]
    # summary text contains no paths or timestamps
    assert str(root) not in (run / "summary.json").read_text()


def test_identical_members_flag_degenerate_epistemic(workspace, tmp_path):
    root, cfg = workspace
    config = exp.RunConfig.load(cfg).with_overrides(out_dir=str(tmp_path / "same"))
    src = root / "run"
    out = tmp_path / "same"
    out.mkdir()
    (out / "split.json").write_bytes((src / "split.json").read_bytes())
    _, models = read_manifest(src / "manifest.json")
    write_manifest(out / "manifest.json", "ensemble", [models[0]] * 3, (0, 1, 2), config.training_hash(), 3)
    summary = exp.cmd_evaluate(config)
    epi = summary.metrics["epistemic"]
    assert epi["cv"] == 0.0
    assert summary.flags["epistemic.cv"] == "degenerate_uncertainty"
    assert epi["ence"] is None and summary.flags["epistemic.ence"] == "degenerate_uncertainty"
    assert summary.flags["epistemic.auce"] == "degenerate_uncertainty"
    # with every variance zero, only exact hits count as covered
    assert epi["mce"] == pytest.approx(20 / 21)
    assert "aleatoric.cv" not in summary.flags
    json.loads((out / "summary.json").read_text())


def test_evaluate_rejects_mismatched_training_config(workspace, tmp_path):
    root, cfg = workspace
    raw = _config(root)
    raw["ensemble"]["hidden"] = [4]
    raw["out_dir"] = str(root / "run")
    other = tmp_path / "other.json"
    raw["data"]["path"] = str(root / "synthetic.csv")
    other.write_text(json.dumps(raw))
    assert main(["evaluate", "--config", str(other)]) == 2


def test_in_vs_out_of_domain_compare(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--split", "group", "--out", str(tmp_path / "ood")]) == 0
    assert main(["evaluate", "--config", str(cfg), "--split", "group", "--out", str(tmp_path / "ood")]) == 0
    ood = json.loads((tmp_path / "ood" / "summary.json").read_text())
    assert ood["domain"] == "out"
    report_path = tmp_path / "cmp.json"
    code = main(["compare", str(root / "run" / "summary.json"), str(tmp_path / "ood" / "summary.json"), "--out", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["format"] == exp.COMPARE_FORMAT
    assert report["error_generalization_ratio"] == pytest.approx(ood["mae"] / report["mae_in"])


def test_compare_identical_summaries_gives_unit_ratios(workspace):
    root, _ = workspace
    s = exp.MetricsSummary.load(root / "run" / "summary.json")
    report = exp.cmd_compare(s, s)
    assert report["error_generalization_ratio"] == 1.0
    for kind in exp.KINDS:
        for idx in exp.INDICES:
            v = report["ratios"][kind][idx]
            if s.metrics[kind][idx] not in (None, 0.0):
                assert v == 1.0


def test_golden_summary_roundtrip():
    text = (DATA_DIR / "golden_summary.json").read_text()
    summary = exp.MetricsSummary.from_json(text)
    assert summary.to_json() == text
    assert summary.metrics["total"]["error_drop"] is None
    assert summary.flags["total.error_drop"] == "infinite"


def test_compare_flags_infinite_and_zero_inputs():
    summary = exp.MetricsSummary.from_json((DATA_DIR / "golden_summary.json").read_text())
    other = exp.MetricsSummary.from_json(summary.to_json())
    other.domain = "out"
    other.metrics["epistemic"]["auco"] = 0.5
    report = exp.cmd_compare(summary, other)
    assert report["ratios"]["total"]["error_drop"] is None
    assert report["flags"]["total.error_drop"] == "non_finite_input"
    assert report["flags"]["epistemic.auco"] == "zero_in_domain"
    json.dumps(report, allow_nan=False)


def test_compare_rejects_lineage_mismatch(tmp_path):
    summary = exp.MetricsSummary.from_json((DATA_DIR / "golden_summary.json").read_text())
    other = exp.MetricsSummary.from_json(summary.to_json())
    other.lineage = "0" * 64
    with pytest.raises(LineageError):
        exp.cmd_compare(summary, other)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(summary.to_json())
    b.write_text(other.to_json())
    assert main(["compare", str(a), str(b)]) == 3


def test_summary_format_checked(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    assert main(["compare", str(bad), str(bad)]) == 3


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_exit_code_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"split": {}}))
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_exit_code_single_member(tmp_path):
    cfg = _write_config(tmp_path, members=1)
    assert main(["train", "--config", str(cfg)]) == 2


def test_exit_code_missing_data(tmp_path):
    cfg = _write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 3


def test_exit_code_divergence(workspace, tmp_path, capsys):
    root, _ = workspace
    raw = _config(root, train={"learning_rate": 1e6, "max_epochs": 5, "patience": 5, "momentum": 0.9})
    raw["data"]["path"] = str(root / "synthetic.csv")
    raw["out_dir"] = str(tmp_path / "div")
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps(raw))
    assert main(["train", "--config", str(cfg)]) == 4
    err = capsys.readouterr().err
    assert "epoch" in err and "member" in err


def test_yaml_config(workspace, tmp_path):
    yaml = pytest.importorskip("yaml")
    root, _ = workspace
    raw = _config(root)
    raw["data"]["path"] = str(root / "synthetic.csv")
    raw["out_dir"] = str(tmp_path / "y")
    raw["ensemble"]["members"] = 2
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    assert main(["train", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "y" / "models").iterdir())) == 2
