import json
import subprocess
import sys

import numpy as np
import pytest

from polyseq.cli import main
from polyseq.data import PRESETS, generate_scene, generate_tile, load_coco, save_png, write_json


def run_pipeline(root, steps=2):
    data, model, preds, metrics = root / "data", root / "model", root / "pred.json", root / "metrics"
    (root / "train.cfg").parent.mkdir(parents=True, exist_ok=True)
    (root / "train.cfg").write_text(f"max_steps = {steps}\nbatch_size = 2\nseed = 3\ncheckpoint_interval = 1\n")
    assert main(["generate", "--preset", "tiny", "--seed", "4", "--count", "3", "--out", str(data)]) == 0
    assert main(["train", "--config", str(root / "train.cfg"), "--data", str(data), "--out", str(model)]) == 0
    assert main(["infer", "--checkpoint", str(model / "model.ckpt"), "--image", str(data / "annotations.json"),
                 "--out", str(preds)]) == 0
    assert main(["eval", "--pred", str(preds), "--gt", str(data / "annotations.json"), "--out", str(metrics)]) == 0
    return [data / "annotations.json", data / "manifest.json", model / "model.ckpt", model / "curve.csv",
            model / "checkpoint_000001.ckpt", preds, metrics / "metrics.json", metrics / "metrics.csv"]


def test_full_pipeline_is_byte_identical(tmp_path, capsys):
    a = run_pipeline(tmp_path / "one")
    b = run_pipeline(tmp_path / "two")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes(), x.name
    doc = json.loads(a[-2].read_text())
    assert len(doc["scenes"]) == 3


def test_generate_writes_pngs_and_manifest(tmp_path):
    assert main(["generate", "--preset", "tiny-road", "--count", "2", "--split", "val", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["split"] == "val" and len(manifest["sample_ids"]) == 2 and manifest["preset"]["mode"] == "road"
    assert len(list(tmp_path.glob("*.png"))) == 2


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    main(["generate", "--count", "2", "--out", str(root / "d")])
    (root / "c.cfg").write_text("max_steps = 1\nbatch_size = 2\n")
    main(["train", "--config", str(root / "c.cfg"), "--data", str(root / "d"), "--out", str(root / "m")])
    return root / "m" / "model.ckpt"


def test_infer_single_png(tmp_path, checkpoint):
    save_png(tmp_path / "scene.png", generate_scene(0, PRESETS["tiny"]).image)
    assert main(["infer", "--checkpoint", str(checkpoint), "--image", str(tmp_path / "scene.png"),
                 "--out", str(tmp_path / "p.json")]) == 0
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["images"][0]["file_name"] == "scene.png" and doc["images"][0]["width"] == 64


def test_infer_tiled_writes_patch_report(tmp_path, checkpoint):
    save_png(tmp_path / "tile.png", generate_tile(0, PRESETS["tiny"], 128).image)
    assert main(["infer", "--checkpoint", str(checkpoint), "--image", str(tmp_path / "tile.png"),
                 "--out", str(tmp_path / "p.json"), "--tile", "--overlap", "0.1"]) == 0
    rows = json.loads((tmp_path / "p_patches.json").read_text())
    assert len(rows) == 9 and rows[0]["origin"] == [0, 0]
    assert load_coco(tmp_path / "p.json", load_images=False)[0].width == 128


def test_infer_tiled_rejects_wrong_patch_size(tmp_path, checkpoint, capsys):
    save_png(tmp_path / "tile.png", np.zeros((128, 128, 3)))
    code = main(["infer", "--checkpoint", str(checkpoint), "--image", str(tmp_path / "tile.png"),
                 "--out", str(tmp_path / "p.json"), "--tile", "--patch-size", "32"])
    assert code == 2 and "patch size" in capsys.readouterr().err


def test_merge_command(tmp_path):
    doc = {"images": [{"id": 1, "file_name": "t.png", "width": 40, "height": 40, "scene_id": "t"}],
           "annotations": [{"id": 1, "image_id": 1, "segmentation": [[2, 2, 20, 2, 20, 20, 2, 20]]},
                           {"id": 2, "image_id": 1, "segmentation": [[10, 10, 30, 10, 30, 30, 10, 30]]},
                           {"id": 3, "image_id": 1, "segmentation": [[33, 33, 38, 33, 38, 38, 33, 38]]}]}
    write_json(tmp_path / "in.json", doc)
    assert main(["merge", "--in", str(tmp_path / "in.json"), "--out", str(tmp_path / "out.json")]) == 0
    merged = load_coco(tmp_path / "out.json", load_images=False)[0].polygons
    assert len(merged.shells) == 2


def test_eval_reports_mismatch(tmp_path, capsys):
    gt = {"images": [{"id": 1, "file_name": "a.png", "width": 16, "height": 16, "scene_id": "a"},
                     {"id": 2, "file_name": "b.png", "width": 16, "height": 16, "scene_id": "b"}],
          "annotations": [{"id": 1, "image_id": 1, "segmentation": [[2, 2, 9, 2, 9, 9, 2, 9]]}]}
    pred = {"images": [gt["images"][0]], "annotations": gt["annotations"]}
    write_json(tmp_path / "gt.json", gt)
    write_json(tmp_path / "pred.json", pred)
    assert main(["eval", "--pred", str(tmp_path / "pred.json"), "--gt", str(tmp_path / "gt.json"),
                 "--out", str(tmp_path / "m")]) == 0
    out = capsys.readouterr()
    assert json.loads(out.out)["iou"] == 1.0 and "skipped 1" in out.err
    assert json.loads((tmp_path / "m" / "metrics_mismatches.json").read_text())["missing_predictions"] == ["b"]


def test_malformed_input_exits_with_code_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["merge", "--in", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o.json")]) == 2
    assert "line 1 column" in capsys.readouterr().err


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("learning_rat = 1\n")
    main(["generate", "--count", "1", "--out", str(tmp_path / "d")])
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "m")]) == 2
    assert "unknown key 'learning_rat'" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "polyseq", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "infer", "eval", "merge"):
        assert cmd in res.stdout
