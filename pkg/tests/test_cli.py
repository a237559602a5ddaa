import json

import numpy as np
import pytest
import yaml
from PIL import Image

from pepseg.artifacts import write_detections
from pepseg.checkpoint import save_checkpoint
from pepseg.cli import main
from pepseg.data import load_dataset
from pepseg.evaluation import Detection

from conftest import tiny_run_config


@pytest.fixture
def tiny_config_file(tmp_path):
    cfg = tiny_run_config().to_dict()
    cfg["train"].update(steps=2, batch_size=2)
    cfg["data"].update(num_images=2)
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_synth_is_deterministic(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a"), "--n", "3", "--seed", "4"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--n", "3", "--seed", "4"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["dataset_sha256"] == b["dataset_sha256"]
    assert (tmp_path / "a" / "annotations.json").read_text() == (tmp_path / "b" / "annotations.json").read_text()
    assert "wrote 3 images" in capsys.readouterr().out


def test_synth_rejects_bad_input(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--n", "0"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--size", "50"]) == 1
    assert "size must be multiple of 32" in capsys.readouterr().err
    assert main(["synth", "--bogus"]) == 1


def test_print_config_round_trips(tmp_path, capsys):
    assert main(["print-config"]) == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["train"]["lr"] == 0.01 and dumped["model"]["num_classes"] == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {learning_rate: 1}\n")
    assert main(["print-config", "--config", str(bad)]) == 1


def test_ground_truth_as_detections_scores_one(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--n", "4", "--seed", "1"]) == 0
    scenes = load_dataset(data)
    dets = [Detection(s.image_id, i.class_id, i.mask, 1.0) for s in scenes for i in s.instances]
    write_detections(dets, tmp_path / "gt.jsonl")
    report = tmp_path / "report.txt"
    assert main(["eval", "--detections", str(tmp_path / "gt.jsonl"), "--data", str(data),
                 "--report", str(report)]) == 0
    assert "AP=1.000000" in capsys.readouterr().out
    assert "AP50=1.000000" in report.read_text()


def test_eval_needs_exactly_one_source(tmp_path):
    assert main(["eval", "--data", str(tmp_path)]) == 1


def test_train_writes_manifest_and_checkpoint(tmp_path, tiny_config_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config_file), "--out", str(out)]) == 0
    text = (out / "run_manifest.json").read_text()
    manifest = json.loads(text)
    assert manifest["config"]["train"]["momentum"] == 0.9
    assert manifest["config"]["train"]["weight_decay"] == 0.0001
    assert '"weight_decay": 0.0001' in text and '"momentum": 0.9' in text
    assert (out / "checkpoint" / "params.bin").exists()
    assert "trained 2 steps" in capsys.readouterr().out


def test_infer_on_blank_image(tmp_path, tiny_model, tiny_cfg, capsys):
    ck = save_checkpoint(tiny_model, tiny_cfg, tmp_path / "ck")
    image = tmp_path / "blank.png"
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(image)
    out = tmp_path / "dets.jsonl"
    assert main(["infer", "--checkpoint", str(ck), "--image", str(image), "--out", str(out),
                 "--overlay", str(tmp_path / "ov.png")]) == 0
    assert "0 instances" in capsys.readouterr().out
    assert out.read_text() == ""
    assert (tmp_path / "ov.png").exists()


def test_infer_rejects_odd_size(tmp_path, tiny_model, tiny_cfg):
    ck = save_checkpoint(tiny_model, tiny_cfg, tmp_path / "ck")
    image = tmp_path / "odd.png"
    Image.fromarray(np.zeros((50, 64, 3), np.uint8)).save(image)
    assert main(["infer", "--checkpoint", str(ck), "--image", str(image)]) == 1


def test_corrupt_checkpoint_exits_with_error(tmp_path, tiny_model, tiny_cfg, capsys):
    ck = save_checkpoint(tiny_model, tiny_cfg, tmp_path / "ck")
    (ck / "params.bin").write_bytes(b"\0" * 16)
    image = tmp_path / "blank.png"
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(image)
    assert main(["infer", "--checkpoint", str(ck), "--image", str(image)]) == 1
    assert "integrity" in capsys.readouterr().err


def test_class_count_mismatch(tmp_path, tiny_model, capsys):
    cfg = tiny_run_config(num_classes=1)
    from pepseg.model import PEPModel
    ck = save_checkpoint(PEPModel(cfg.model), cfg, tmp_path / "ck")
    data = tmp_path / "data"
    main(["synth", "--out", str(data), "--n", "6", "--seed", "0"])
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data)]) == 1
    assert "class-count mismatch" in capsys.readouterr().err


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--coords", "6"]) == 0
    assert "5/5 terms pass" in capsys.readouterr().out
    assert main(["gradcheck", "--coords", "6", "--sabotage", "L_Mask"]) == 2
    assert "FAIL" in capsys.readouterr().out
