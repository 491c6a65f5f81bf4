"""End-to-end command-line pipeline: every subcommand through main(argv)."""

import json
import shutil

import numpy as np
import pytest

from petctseg.cli import main
from petctseg.data import (Modality, PatientRecord, SplitManifest,
                           ground_truth_mask, read_patient, write_cohort)
from petctseg.raster import read_ppm
from petctseg.trainer import load_checkpoint, predict_volume, read_checkpoint_header

DIMS = (4, 16, 16)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Cohort, manifest, and one trained checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cliws")
    assert main(["phantom", "--out", str(root / "cohort"), "--patients", "6",
                 "--dims", "4,16,16", "--seed", "3"]) == 0
    assert main(["split", "--cohort", str(root / "cohort"),
                 "--fractions", "0.5,0.25,0.25", "--seed", "0",
                 "--out", str(root / "manifest.json")]) == 0
    config = {
        "cohort": "cohort",
        "out": "run",
        "manifest": "manifest.json",
        "experiment": {
            "modality": "petct",
            "loss": "dice",
            "windowing": None,
            "seed": 1,
            "unet": {"depth": 1, "base_filters": 4},
            "adam": {"learning_rate": 1e-3},
            "batch_size": 4,
            "epochs": 2,
            "eval_every": 1,
        },
    }
    (root / "train.json").write_text(json.dumps(config))
    assert main(["train", "--config", str(root / "train.json")]) == 0
    ckpts = list((root / "run" / "checkpoints").glob("*.ckpt"))
    assert len(ckpts) == 1
    return {"root": root, "cohort": root / "cohort",
            "manifest": root / "manifest.json", "checkpoint": ckpts[0]}


# -- parser behavior -------------------------------------------------------------


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "COMMAND" in capsys.readouterr().out


@pytest.mark.parametrize("command", ["phantom", "validate", "split", "train",
                                     "grid", "eval", "predict", "overlay"])
def test_subcommand_help_exits_zero(command, capsys):
    assert main([command, "--help"]) == 0
    out = capsys.readouterr().out
    assert "usage:" in out


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 1


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1


def test_bad_dims_flag_is_usage_error(capsys):
    assert main(["phantom", "--out", "x", "--patients", "3",
                 "--dims", "4x16x16", "--seed", "0"]) == 1


# -- phantom ---------------------------------------------------------------------


def test_phantom_writes_deterministic_cohort(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--patients", "3", "--dims", "4,16,16", "--seed", "11"]
    assert main(["phantom", "--out", str(a), *args]) == 0
    assert main(["phantom", "--out", str(b), *args]) == 0
    blob = "ph000/ct.f32"
    assert (a / blob).read_bytes() == (b / blob).read_bytes()
    out = capsys.readouterr().out
    assert "positive" in out and "stage T" in out


def test_phantom_refuses_nonempty_dir_without_force(tmp_path, capsys):
    out = tmp_path / "c"
    args = ["--patients", "3", "--dims", "4,16,16", "--seed", "11"]
    assert main(["phantom", "--out", str(out), *args]) == 0
    assert main(["phantom", "--out", str(out), *args]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["phantom", "--out", str(out), *args, "--force"]) == 0


# -- validate --------------------------------------------------------------------


def test_validate_pristine_cohort(workspace, capsys):
    assert main(["validate", "--cohort", str(workspace["cohort"])]) == 0
    assert "0 findings" in capsys.readouterr().out


def test_validate_reports_corruption(workspace, tmp_path, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(workspace["cohort"], broken)
    gtv = broken / "ph000" / "gtv.u8"
    blob = bytearray(gtv.read_bytes())
    blob[0] = 2
    gtv.write_bytes(bytes(blob))
    ct = broken / "ph001" / "ct.f32"
    ct.write_bytes(ct.read_bytes()[:-8])
    assert main(["validate", "--cohort", str(broken)]) == 2
    out = capsys.readouterr().out
    assert "non-binary mask" in out
    assert "size" in out


def test_validate_missing_dir_is_data_error(tmp_path):
    assert main(["validate", "--cohort", str(tmp_path / "nope")]) == 2


# -- split -----------------------------------------------------------------------


def test_split_writes_parseable_manifest(workspace, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["split", "--cohort", str(workspace["cohort"]),
                 "--fractions", "0.5,0.25,0.25", "--seed", "5",
                 "--out", str(out)]) == 0
    manifest = SplitManifest.from_json(out.read_text())
    assert len(manifest.train) == 3
    assert len(manifest.val) == 2  # largest-remainder rounding on 6 patients
    assert len(manifest.test) == 1
    assert "train 3" in capsys.readouterr().out


def test_split_rejects_bad_fractions(workspace, capsys):
    assert main(["split", "--cohort", str(workspace["cohort"]),
                 "--fractions", "0.5,0.2,0.2", "--seed", "5",
                 "--out", "m.json"]) == 1
    assert "sum to 1" in capsys.readouterr().err


# -- train -----------------------------------------------------------------------


def test_train_prints_hash_embedded_in_checkpoint(workspace, capsys):
    # rerun the workspace config; first stdout line carries the cell hash
    assert main(["train", "--config", str(workspace["root"] / "train.json")]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("config ")
    printed = first.split()[1]
    assert len(printed) == 64
    header = read_checkpoint_header(workspace["checkpoint"])
    assert header["config_hash"] == printed


def test_train_writes_result_json(workspace):
    results = list((workspace["root"] / "run" / "results").glob("*.json"))
    assert len(results) == 1
    doc = json.loads(results[0].read_text())
    assert doc["status"] == "ok"
    assert doc["config_hash"] == results[0].stem


def test_train_rejects_unknown_config_keys(workspace, tmp_path, capsys):
    doc = json.loads((workspace["root"] / "train.json").read_text())
    doc["cohort"] = str(workspace["cohort"])
    doc["manifest"] = str(workspace["manifest"])
    doc["out"] = str(tmp_path / "out")
    doc["experiment"]["optimizer"] = "sgd"
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_train_rejects_in_channels_override(workspace, tmp_path, capsys):
    doc = json.loads((workspace["root"] / "train.json").read_text())
    doc["cohort"] = str(workspace["cohort"])
    doc["manifest"] = str(workspace["manifest"])
    doc["out"] = str(tmp_path / "out")
    doc["experiment"]["unet"]["in_channels"] = 7
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "in_channels" in capsys.readouterr().err


def test_train_config_must_be_valid_json(tmp_path, capsys):
    cfg = tmp_path / "mangled.json"
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


def test_train_divergence_exit_code(workspace, tmp_path, capsys):
    doc = json.loads((workspace["root"] / "train.json").read_text())
    doc["cohort"] = str(workspace["cohort"])
    doc["manifest"] = str(workspace["manifest"])
    doc["out"] = str(tmp_path / "out")
    doc["experiment"]["loss"] = "cross_entropy"
    doc["experiment"]["adam"] = {"learning_rate": 1e12}
    doc["experiment"]["epochs"] = 3
    cfg = tmp_path / "diverge.json"
    cfg.write_text(json.dumps(doc))
    with np.errstate(over="ignore", invalid="ignore"):
        assert main(["train", "--config", str(cfg)]) == 3
    assert "non-finite" in capsys.readouterr().err


# -- grid ------------------------------------------------------------------------


def test_grid_runs_and_resumes(workspace, tmp_path, capsys):
    config = {
        "cohort": str(workspace["cohort"]),
        "out": str(tmp_path / "grid"),
        "manifest": str(workspace["manifest"]),
        "grid": {
            "modalities": ["ct", "pet"],
            "losses": ["dice"],
            "windows": [None],
            "seeds": [1],
            "depth": 1,
            "base_filters": 4,
            "adam": {"learning_rate": 1e-3},
            "batch_size": 4,
            "epochs": 1,
            "eval_every": 1,
        },
    }
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps(config))
    assert main(["grid", "--config", str(cfg), "--workers", "1"]) == 0
    out = capsys.readouterr().out
    hashes = [line.split()[1] for line in out.splitlines()
              if line.startswith("config ")]
    assert len(hashes) == 2 and len(set(hashes)) == 2
    assert "CT-only" in out and "PET-only" in out

    out_dir = tmp_path / "grid"
    for name in ("results.jsonl", "report.txt", "selection.json",
                 "test_metrics_ct.csv", "test_metrics_pet.csv"):
        assert (out_dir / name).exists()
    report = (out_dir / "report.txt").read_text().splitlines()
    assert report[0].startswith("Modality & Sensitivity")
    assert len(report) == 3

    # identical rerun resumes every cell from its result file
    assert main(["grid", "--config", str(cfg), "--workers", "1"]) == 0
    rerun = capsys.readouterr().out
    assert "resumed: 2 cells already complete" in rerun
    assert sorted(hashes) == sorted(line.split()[1]
                                    for line in rerun.splitlines()
                                    if line.startswith("config "))


def test_grid_rejects_worker_count_zero(workspace, tmp_path, capsys):
    config = {
        "cohort": str(workspace["cohort"]),
        "out": str(tmp_path / "grid"),
        "manifest": str(workspace["manifest"]),
        "grid": {"modalities": ["ct"], "losses": ["dice"], "windows": [None],
                 "seeds": [1], "depth": 1, "base_filters": 4, "epochs": 1},
    }
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps(config))
    assert main(["grid", "--config", str(cfg), "--workers", "0"]) == 1


# -- eval ------------------------------------------------------------------------


def test_eval_writes_csv_and_table(workspace, tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--checkpoint", str(workspace["checkpoint"]),
                 "--cohort", str(workspace["cohort"]),
                 "--manifest", str(workspace["manifest"]),
                 "--split", "test", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("Modality & Sensitivity & Specificity & Dice & PPV")
    assert "PET/CT &" in printed
    rows = out.read_text().splitlines()
    assert rows[0] == "patient_id,tp,fp,fn,tn,dice,sensitivity,specificity,ppv"
    assert rows[-1].startswith("mean,")


def test_eval_perfect_self_prediction_scores_ones(workspace, tmp_path, capsys):
    """A cohort whose truth is the model's own prediction scores 1.00."""
    model, _, config, _ = load_checkpoint(workspace["checkpoint"])
    records = []
    for i in range(4):
        rec = read_patient(workspace["cohort"] / f"ph00{i}")
        _, mask = predict_volume(model, rec, config.modality, config.windowing)
        records.append(PatientRecord(patient_id=rec.patient_id,
                                     t_stage=rec.t_stage, ct=rec.ct,
                                     pet=rec.pet, gtv=mask,
                                     nodes=np.zeros_like(mask)))
    self_dir = tmp_path / "self"
    write_cohort(self_dir, records)
    manifest = {"train": ["ph000"], "val": ["ph001"],
                "test": ["ph002", "ph003"],
                "histograms": {"train": {}, "val": {}, "test": {}}}
    manifest_path = tmp_path / "self_manifest.json"
    manifest_path.write_text(json.dumps(manifest))
    out = tmp_path / "self.csv"
    assert main(["eval", "--checkpoint", str(workspace["checkpoint"]),
                 "--cohort", str(self_dir), "--manifest", str(manifest_path),
                 "--split", "test", "--out", str(out)]) == 0
    row = capsys.readouterr().out.splitlines()[1]
    cells = [c.strip() for c in row.split("&")[1:]]
    assert all(c.startswith("$1.00 \\pm") for c in cells)


def test_eval_missing_checkpoint_is_data_error(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--cohort", str(workspace["cohort"]),
                 "--manifest", str(workspace["manifest"]),
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_eval_rejects_unknown_split_name(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(workspace["checkpoint"]),
                 "--cohort", str(workspace["cohort"]),
                 "--manifest", str(workspace["manifest"]),
                 "--split", "holdout", "--out", str(tmp_path / "x.csv")]) == 1


# -- predict ---------------------------------------------------------------------


def test_predict_writes_blobs_and_meta(workspace, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(workspace["checkpoint"]),
                 "--patient", str(workspace["cohort"] / "ph000"),
                 "--out", str(out)]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["patient_id"] == "ph000"
    assert tuple(meta["dims"]) == DIMS
    n = int(np.prod(DIMS))
    probs = np.frombuffer((out / "prob.f32").read_bytes(), dtype="<f4")
    mask = np.frombuffer((out / "pred.u8").read_bytes(), dtype=np.uint8)
    assert probs.size == n and mask.size == n
    assert np.isin(mask, (0, 1)).all()
    assert (probs >= 0).all() and (probs <= 1).all()
    assert meta["positive_voxels"] == int(mask.sum())


def test_predict_is_deterministic(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["predict", "--checkpoint", str(workspace["checkpoint"]),
                     "--patient", str(workspace["cohort"] / "ph001"),
                     "--out", str(out)]) == 0
    assert (a / "prob.f32").read_bytes() == (b / "prob.f32").read_bytes()
    assert (a / "pred.u8").read_bytes() == (b / "pred.u8").read_bytes()


# -- overlay ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def prediction_dir(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("pred") / "ph000"
    assert main(["predict", "--checkpoint", str(workspace["checkpoint"]),
                 "--patient", str(workspace["cohort"] / "ph000"),
                 "--out", str(out)]) == 0
    return out


def test_overlay_dimensions_match_slice(workspace, prediction_dir, tmp_path):
    out = tmp_path / "slice.ppm"
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", "2",
                 "--out", str(out), "--window", "200,70"]) == 0
    rgb = read_ppm(out)
    assert rgb.shape == (DIMS[1], DIMS[2], 3)


def test_overlay_marks_truth_contour(workspace, prediction_dir, tmp_path):
    rec = read_patient(workspace["cohort"] / "ph000")
    truth = ground_truth_mask(rec)
    k = int(np.argmax(truth.sum(axis=(1, 2))))  # slice with most tumor
    out = tmp_path / "k.ppm"
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", str(k),
                 "--out", str(out)]) == 0
    rgb = read_ppm(out)
    green = (rgb == np.array([0, 255, 0], dtype=np.uint8)).all(axis=2)
    yellow = (rgb == np.array([255, 255, 0], dtype=np.uint8)).all(axis=2)
    assert (green | yellow).any()


def test_overlay_pet_channel(workspace, prediction_dir, tmp_path):
    out = tmp_path / "pet.ppm"
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", "0",
                 "--out", str(out), "--channel", "pet"]) == 0
    assert read_ppm(out).shape == (DIMS[1], DIMS[2], 3)


def test_overlay_rejects_window_on_pet(workspace, prediction_dir, tmp_path, capsys):
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", "0",
                 "--out", str(tmp_path / "x.ppm"), "--channel", "pet",
                 "--window", "200,70"]) == 2


def test_overlay_slice_out_of_range(workspace, prediction_dir, tmp_path):
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", "99",
                 "--out", str(tmp_path / "x.ppm")]) == 2


def test_overlay_rejects_mismatched_prediction(workspace, prediction_dir,
                                               tmp_path):
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph001"),
                 "--pred", str(prediction_dir), "--slice", "0",
                 "--out", str(tmp_path / "x.ppm")]) == 0  # same dims, fine
    other = tmp_path / "other"
    shutil.copytree(prediction_dir, other)
    meta = json.loads((other / "meta.json").read_text())
    meta["dims"] = [2, 16, 16]
    (other / "meta.json").write_text(json.dumps(meta))
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(other), "--slice", "0",
                 "--out", str(tmp_path / "y.ppm")]) == 2


def test_overlay_bad_window_flag_is_usage_error(workspace, prediction_dir,
                                                tmp_path):
    assert main(["overlay", "--patient", str(workspace["cohort"] / "ph000"),
                 "--pred", str(prediction_dir), "--slice", "0",
                 "--out", str(tmp_path / "x.ppm"), "--window", "200"]) == 1
