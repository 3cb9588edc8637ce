import json
import math
from dataclasses import fields

import numpy as np
import pytest
import torch
import yaml

from shadowpairs import checkpoint as ckpt_io
from shadowpairs.cli import main
from shadowpairs.data import load_annotations, load_detections, read_image, save_detections
from shadowpairs.evaluation import MetricReport


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--n", "3", "--seed", "4", "--size", "64x64", "--pairs", "1..2"]) == 0
    return out / "annotations.json"


def _write_config(tmp_path, data, out_name="run", epochs=2, layers=1, every=1):
    doc = {
        "model": {
            "extractor": {"channel_count": 32, "stem_width": 8, "stage_widths": [16, 16, 32]},
            "num_layers": layers,
            "n_activation": 4,
            "n_auxiliary": 2,
        },
        "train": {"lr": 1e-3, "warmup_iters": 1, "epochs": epochs, "batch_size": 2, "points": 64},
        "data": {"train": str(data), "val": str(data), "output_dir": str(tmp_path / out_name), "checkpoint_every": every},
        "seed": 0,
    }
    path = tmp_path / f"{out_name}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    tmp = tmp_path_factory.mktemp("train")
    cfg = _write_config(tmp, dataset, epochs=2)
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp / "run"


def test_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--n", "4", "--seed", "1", "--size", "48x64"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and len(a) == 5
    samples = load_annotations(tmp_path / "a" / "annotations.json")
    assert all(s.image.shape == (48, 64, 3) for s in samples)


def test_gen_data_exact_pairs(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "3", "--pairs", "2..2", "--size", "96x96"]) == 0
    assert all(len(s.instances) == 2 for s in load_annotations(tmp_path / "annotations.json"))


@pytest.mark.parametrize("size", ["0x10", "abc", "10"])
def test_gen_data_invalid_size(tmp_path, size, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--size", size]) != 0
    assert "invalid size" in capsys.readouterr().err


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub")]) != 0


def test_train_outputs(trained, dataset):
    log = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 * math.ceil(3 / 2)
    assert {"epoch", "iter", "lr", "total", "L_IA_q", "L_pred", "L_pred_gt", "L_d"} <= set(log[0])
    assert (trained / "final.ckpt").is_file()
    assert (trained / "checkpoint_epoch0001.ckpt").is_file()


def test_train_missing_dataset(tmp_path, capsys):
    cfg = _write_config(tmp_path, tmp_path / "nowhere.json")
    assert main(["train", "--config", str(cfg)]) != 0
    assert "nowhere.json" in capsys.readouterr().err


def test_train_unknown_key(tmp_path, dataset, capsys):
    cfg = _write_config(tmp_path, dataset)
    doc = yaml.safe_load(cfg.read_text())
    doc["train"]["epoch"] = 3
    cfg.write_text(yaml.safe_dump(doc))
    assert main(["train", "--config", str(cfg)]) != 0
    assert "train.epoch" in capsys.readouterr().err


def test_train_resume_matches(tmp_path, trained, dataset):
    cfg = _write_config(tmp_path, dataset, out_name="resumed", epochs=2)
    assert main(["train", "--config", str(cfg), "--resume", str(trained / "checkpoint_epoch0001.ckpt")]) == 0
    full = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    rest = [json.loads(line) for line in (tmp_path / "resumed" / "train_log.jsonl").read_text().splitlines()]
    assert rest == full[len(full) - len(rest) :]
    a = ckpt_io.load(trained / "final.ckpt").parameters
    b = ckpt_io.load(tmp_path / "resumed" / "final.ckpt").parameters
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_train_resume_depth_mismatch(tmp_path, trained, dataset, capsys):
    cfg = _write_config(tmp_path, dataset, out_name="deep", layers=2)
    assert main(["train", "--config", str(cfg), "--resume", str(trained / "final.ckpt")]) != 0
    assert "depth mismatch" in capsys.readouterr().err


def test_eval_oracles(tmp_path, dataset, capsys):
    report = tmp_path / "gt.json"
    assert main(["eval", "--oracle", "gt", "--data", str(dataset), "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert set(doc) == {f.name for f in fields(MetricReport)}
    for key in ("soap_segm", "soap_bbox", "assoc_ap_segm", "assoc_ap_bbox", "inst_ap_segm", "inst_ap_bbox"):
        assert doc[key] == 1.0
    assert "soap_segm" in capsys.readouterr().out
    assert main(["eval", "--oracle", "empty", "--data", str(dataset), "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    for key in ("soap_segm", "soap_bbox", "assoc_ap_segm", "assoc_ap_bbox", "inst_ap_segm", "inst_ap_bbox"):
        assert doc[key] == 0.0


def test_eval_checkpoint(tmp_path, trained, dataset):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset), "--report", str(a)]) == 0
    assert main(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset), "--report", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_depth_mismatch(tmp_path, trained, dataset, capsys):
    cfg = _write_config(tmp_path, dataset, layers=3)
    args = ["eval", "--checkpoint", str(trained / "final.ckpt"), "--config", str(cfg), "--data", str(dataset)]
    assert main(args) != 0
    assert "depth mismatch" in capsys.readouterr().err


def test_infer_and_render(tmp_path, trained, dataset):
    image = dataset.parent / "scene_4_00000.png"
    dets = tmp_path / "dets.json"
    overlay = tmp_path / "overlay.png"
    assert main(["infer", "--checkpoint", str(trained / "final.ckpt"), "--image", str(image), "--out", str(dets), "--render", str(overlay)]) == 0
    images, per_image = load_detections(dets)
    assert images[0]["height"] == 64 and len(per_image) == 1
    assert read_image(overlay).shape == read_image(image).shape
    out = tmp_path / "r.png"
    assert main(["render", "--checkpoint", str(trained / "final.ckpt"), "--image", str(image), "--out", str(out)]) == 0
    assert read_image(out).shape == (64, 64, 3)


def test_render_zero_detections_identity(tmp_path, dataset):
    image = dataset.parent / "scene_4_00001.png"
    empty = tmp_path / "none.json"
    save_detections(empty, [{"id": 0, "file_name": image.name, "height": 64, "width": 64}], [[]])
    out = tmp_path / "same.png"
    assert main(["render", "--image", str(image), "--detections", str(empty), "--out", str(out)]) == 0
    assert np.array_equal(read_image(out), read_image(image))


def test_unreadable_image(tmp_path, trained, capsys):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    assert main(["infer", "--checkpoint", str(trained / "final.ckpt"), "--image", str(bad), "--out", str(tmp_path / "d.json")]) != 0
    assert "cannot read image" in capsys.readouterr().err


def test_log_level_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SHADOWPAIRS_LOG_LEVEL", "debug")
    assert main(["gen-data", "--out", str(tmp_path), "--n", "1", "--size", "64x64"]) == 0
