import json
import os
import sys
import textwrap

import numpy as np
import pytest
from PIL import Image

from aerodet import cli, dota


def run(argv):
    return cli.main(argv)


def write_png(path, array):
    Image.fromarray(array).save(path)


@pytest.fixture
def image_768(tmp_path):
    rng = np.random.default_rng(5)
    arr = rng.integers(0, 255, (768, 768), dtype=np.uint8)
    p = tmp_path / "scene.png"
    write_png(p, arr)
    return p, arr


class TestSlice:
    def test_four_patches_and_plan(self, tmp_path, image_768, capsys):
        src, _ = image_768
        out = tmp_path / "out"
        assert run(["slice", "--input", str(src), "--out", str(out),
                    "--slice-w", "512", "--slice-h", "512", "--overlap", "0.25"]) == 0
        patches = sorted(out.glob("scene_*.png"))
        assert len(patches) == 4
        plan = json.loads((out / "plan.json").read_text())
        assert len(plan["scene.png"]["rects"]) == 4
        assert (out / "manifest.json").is_file()

    def test_tiny_image_single_patch(self, tmp_path):
        arr = np.arange(100, dtype=np.uint8).reshape(10, 10)
        src = tmp_path / "tiny.png"
        write_png(src, arr)
        out = tmp_path / "out"
        assert run(["slice", "--input", str(src), "--out", str(out)]) == 0
        (patch,) = sorted(out.glob("tiny_*.png"))
        assert patch.name == "tiny_0_0_10_10.png"
        assert np.array_equal(np.asarray(Image.open(patch)), arr)

    def test_missing_input_exit_2(self, tmp_path, capsys):
        assert run(["slice", "--input", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err


@pytest.fixture
def dota_fixture(tmp_path):
    images = tmp_path / "images"
    labels = tmp_path / "labels"
    images.mkdir()
    labels.mkdir()
    write_png(images / "a.png", np.zeros((40, 60), dtype=np.uint8))
    (labels / "a.txt").write_text(
        "imagesource:fixture\n"
        "5 0 10 5 5 10 0 5 plane 0\n"
        "1 1 9 1 9 6 1 6 storage tank 1\n")
    write_png(images / "b.png", np.zeros((20, 20), dtype=np.uint8))
    (labels / "b.txt").write_text("0 0 8 0 8 8 0 8 ship 0\n")
    return images, labels


class TestConvert:
    def test_fixture_to_coco(self, tmp_path, dota_fixture):
        images, labels = dota_fixture
        out = tmp_path / "coco.json"
        assert run(["convert", "dota2coco", "--images", str(images),
                    "--labels", str(labels), "--out", str(out)]) == 0
        ds = json.loads(out.read_text())
        assert len(ds["images"]) == 2
        assert len(ds["annotations"]) == 3
        assert len(ds["categories"]) == 16
        rotated = ds["annotations"][0]
        assert rotated["bbox"] == [0, 0, 10, 10]
        assert rotated["area"] == 50.0

    def test_repeat_is_byte_identical(self, tmp_path, dota_fixture):
        images, labels = dota_fixture
        o1, o2 = tmp_path / "c1.json", tmp_path / "c2.json"
        run(["convert", "dota2coco", "--images", str(images),
             "--labels", str(labels), "--out", str(o1)])
        run(["convert", "dota2coco", "--images", str(images),
             "--labels", str(labels), "--out", str(o2)])
        assert o1.read_bytes() == o2.read_bytes()

    def test_empty_labels_valid_shell(self, tmp_path):
        images = tmp_path / "images"
        labels = tmp_path / "labels"
        images.mkdir()
        labels.mkdir()
        out = tmp_path / "coco.json"
        assert run(["convert", "dota2coco", "--images", str(images),
                    "--labels", str(labels), "--out", str(out)]) == 0
        ds = json.loads(out.read_text())
        assert ds["annotations"] == [] and len(ds["categories"]) == 16

    def test_malformed_line_exit_3(self, tmp_path, dota_fixture, capsys):
        images, labels = dota_fixture
        (labels / "a.txt").write_text("1 2 3 plane\n")
        code = run(["convert", "dota2coco", "--images", str(images),
                    "--labels", str(labels), "--out", str(tmp_path / "c.json")])
        assert code == 3
        err = capsys.readouterr().err
        assert "a.txt" in err and "line 1" in err


def make_gt_coco(tmp_path, boxes, image_name="scene.png", size=(768, 768)):
    anns = []
    for i, (cls, box) in enumerate(boxes, start=1):
        x0, y0, x1, y1 = box
        anns.append({"id": i, "image_id": 1, "category_id": cls + 1,
                     "bbox": [x0, y0, x1 - x0, y1 - y0],
                     "area": (x1 - x0) * (y1 - y0), "iscrowd": 0})
    ds = {
        "images": [{"id": 1, "file_name": image_name,
                    "width": size[0], "height": size[1]}],
        "annotations": anns,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(dota.CATEGORIES)],
    }
    p = tmp_path / "gt.json"
    p.write_text(json.dumps(ds))
    return p


class TestEval:
    def test_perfect_predictions(self, tmp_path):
        gt = make_gt_coco(tmp_path, [(0, (10, 10, 50, 50)), (1, (100, 100, 150, 160))])
        preds = [{"image_id": 1, "class_id": 0, "score": 0.9,
                  "bbox": [10, 10, 50, 50]},
                 {"image_id": 1, "class_id": 1, "score": 0.8,
                  "bbox": [100, 100, 150, 160]}]
        pred_path = tmp_path / "preds.json"
        pred_path.write_text(json.dumps(preds))
        out = tmp_path / "eval"
        assert run(["eval", "--pred", str(pred_path), "--gt", str(gt),
                    "--iou", "0.5", "--out-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["precision"] == 100.0
        assert report["recall"] == 100.0
        assert report["f1"] == 100.0
        assert (out / "confusion_matrix.csv").is_file()
        assert (out / "curves.csv").is_file()
        assert (out / "pr_curve.csv").is_file()

    def test_empty_predictions(self, tmp_path):
        gt = make_gt_coco(tmp_path, [(0, (10, 10, 50, 50))])
        pred_path = tmp_path / "preds.json"
        pred_path.write_text("[]")
        out = tmp_path / "eval"
        assert run(["eval", "--pred", str(pred_path), "--gt", str(gt),
                    "--out-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["precision"] == 0.0 and report["recall"] == 0.0

    def test_schema_mismatch_exit_4(self, tmp_path, capsys):
        gt = make_gt_coco(tmp_path, [])
        pred_path = tmp_path / "preds.json"
        pred_path.write_text(json.dumps([{"not": "a detection"}]))
        assert run(["eval", "--pred", str(pred_path), "--gt", str(gt),
                    "--out-dir", str(tmp_path / "e")]) == 4


class TestInfer:
    def test_mock_oracle_straddling_object(self, tmp_path, image_768):
        src, arr = image_768
        gt = make_gt_coco(tmp_path, [(1, (300, 100, 430, 180))])
        out = tmp_path / "dets.json"
        assert run(["infer", "--image", str(src), "--detector", "mock-oracle",
                    "--gt", str(gt), "--out", str(out),
                    "--slice-w", "512", "--slice-h", "512",
                    "--overlap", "0.25"]) == 0
        dets = json.loads(out.read_text())
        assert len(dets) == 1
        assert dets[0]["bbox"] == [300.0, 100.0, 430.0, 180.0]

    def test_no_objects_empty_array(self, tmp_path, image_768):
        src, _ = image_768
        gt = make_gt_coco(tmp_path, [])
        out = tmp_path / "dets.json"
        assert run(["infer", "--image", str(src), "--detector", "mock-oracle",
                    "--gt", str(gt), "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == []

    def test_external_detector_protocol(self, tmp_path, image_768):
        src, _ = image_768
        script = tmp_path / "detector.py"
        script.write_text(textwrap.dedent("""\
            import json, sys
            for line in sys.stdin:
                req = json.loads(line)
                dets = [{"class_id": 2, "score": 0.75,
                         "bbox": [1.0, 1.0, 9.0, 9.0]}]
                print(json.dumps({"id": req["id"], "detections": dets}), flush=True)
            """))
        out = tmp_path / "dets.json"
        assert run(["infer", "--image", str(src),
                    "--detector", f"exec:{sys.executable} {script}",
                    "--out", str(out)]) == 0
        dets = json.loads(out.read_text())
        assert all(d["class_id"] == 2 for d in dets)
        assert len(dets) >= 1

    def test_detector_crash_exit_5_no_output(self, tmp_path, image_768, capsys):
        src, _ = image_768
        script = tmp_path / "crash.py"
        script.write_text("import sys; sys.exit(9)\n")
        out = tmp_path / "dets.json"
        code = run(["infer", "--image", str(src),
                    "--detector", f"exec:{sys.executable} {script}",
                    "--out", str(out)])
        assert code == 5
        assert not out.exists()


class TestBenchAndSelftest:
    def test_bench_runs(self, capsys):
        assert run(["bench", "--sizes", "1x2x1,64x4x2"]) == 0
        out = capsys.readouterr().out
        assert "elems/s" in out
        assert len(out.strip().splitlines()) == 3

    def test_selftest_info_only(self, capsys):
        assert run(["selftest", "info"]) == 0
        out = capsys.readouterr().out
        assert "info_bottleneck" in out

    def test_selftest_force_fail_exit_1(self, capsys):
        assert run(["selftest", "--force-fail", "zoh_closed_form"]) == 1
        err = capsys.readouterr().err
        assert "zoh_closed_form" in err
