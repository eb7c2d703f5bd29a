import json
import shutil

import pytest

from busdensity.cli import STAGES, main

ARTIFACTS = [
    "synth/manifest.csv", "clean/patients.csv", "clean/cleaning_log.csv", "clean/exclusions.csv", "clean/images.csv",
    "features.csv", "matched.csv", "split.csv", "model.json", "predictions.csv", "patient_predictions.csv",
    "eval.json", "eval.csv", "roc_points_patient.csv", "risk.json", "risk.csv", "report.md",
]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["all", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_full_chain_artifacts(run_dir):
    for name in ARTIFACTS:
        assert (run_dir / name).is_file(), name
    for stage in STAGES:
        meta = json.loads((run_dir / "meta" / f"{stage}.json").read_text())
        assert meta["seed"] == 7 and len(meta["config_digest"]) == 64 and "numpy" in meta["versions"]


def test_test_split_is_the_matched_set(run_dir):
    matched = set()
    for line in (run_dir / "matched.csv").read_text().splitlines()[1:]:
        case, ctrl = line.split(",")[:2]
        matched |= {case, ctrl} - {""}
    split = dict(line.split(",") for line in (run_dir / "split.csv").read_text().splitlines()[1:])
    assert {p for p, s in split.items() if s == "test"} == matched


@pytest.mark.parametrize("stage, artifact", [
    ("featurize", "features.csv"), ("train", "model.json"), ("evaluate", "eval.json"), ("risk", "risk.json"),
])
def test_stage_isolation(run_dir, stage, artifact):
    before = (run_dir / artifact).read_bytes()
    (run_dir / artifact).unlink()
    assert main([stage, "--seed", "7", "--out", str(run_dir)]) == 0
    assert (run_dir / artifact).read_bytes() == before


def test_rerun_in_another_directory_is_identical(run_dir, tmp_path):
    other = tmp_path / "again"
    assert main(["all", "--seed", "7", "--out", str(other)]) == 0
    for name in ARTIFACTS:
        assert (other / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_external_predictions_enter_at_aggregate(run_dir, tmp_path, capsys):
    work = tmp_path / "ext"
    shutil.copytree(run_dir, work)
    ext = tmp_path / "external.csv"
    rows = (run_dir / "predictions.csv").read_text().splitlines()
    ext.write_text("\n".join(rows[:1] + [",".join(r.split(",")[:2] + ["0.25"] * 4) for r in rows[1:]]) + "\n")
    assert main(["aggregate", "--seed", "7", "--out", str(work), "--predictions", str(ext)]) == 0
    assert main(["evaluate", "--seed", "7", "--out", str(work), "--predictions", str(ext)]) == 0
    ev = json.loads((work / "eval.json").read_text())
    assert ev["patient"]["overall"]["micro"]["auc"] == 0.5


def test_single_class_predictions_exit_1(run_dir, tmp_path, capsys):
    work = tmp_path / "deg"
    shutil.copytree(run_dir, work)
    patients = (run_dir / "clean" / "patients.csv").read_text().splitlines()
    b_women = [line.split(",")[0] for line in patients[1:] if line.split(",")[4] == "B"][:3]
    ext = tmp_path / "one_class.csv"
    ext.write_text("image_id,patient_id,pA,pB,pC,pD\n" + "".join(f"{p}_x,{p},0,1,0,0\n" for p in b_women))
    assert main(["evaluate", "--seed", "7", "--out", str(work), "--predictions", str(ext)]) == 1
    assert "degenerate labels" in capsys.readouterr().err


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1  # no seed
    assert main(["train", "--seed", "1", "--bogus"]) == 1
    assert main(["train", "--seed", "1", "--out", str(tmp_path / "empty")]) == 1  # missing inputs
    assert main(["frobnicate"]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"seed": 1, "modle": "logreg"}))
    assert main(["synth", "--config", str(tmp_path / "bad.json")]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_drives_run(tmp_path):
    cfg = {"seed": 3, "out": str(tmp_path / "r"), "model": "forest", "forest": {"n_trees": 10},
           "synth": {"n_women": 120}, "aggregation": "vote"}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["all", "--config", str(tmp_path / "c.json")]) == 0
    model = json.loads((tmp_path / "r" / "model.json").read_text())
    assert model["kind"] == "forest" and model["hyperparameters"]["n_trees"] == 10
    line = (tmp_path / "r" / "patient_predictions.csv").read_text().splitlines()[1]
    assert sorted(line.split(",")[1:5]) == ["0.0", "0.0", "0.0", "1.0"]


def test_corrupt_model_file_exit_1(run_dir, tmp_path, capsys):
    work = tmp_path / "bad"
    shutil.copytree(run_dir, work)
    (work / "model.json").write_text("garbage")
    assert main(["predict", "--seed", "7", "--out", str(work)]) == 1
    assert "bad_model_file" in capsys.readouterr().err
