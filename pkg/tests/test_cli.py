import json

import numpy as np
import pytest

from crgx.cli import main
from crgx.imgio import Image, read_image, write_image
from crgx.zoo import build_model


def put_image(path, seed, shape=(3, 6, 6)):
    pixels = np.random.default_rng(seed).uniform(0.0, 1.0, shape)
    write_image(path, Image(pixels))
    return pixels


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["explain", "--image", "x.ppm", "--method", "gradcam", "--bogus"])
    assert err.value.code == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--images", "somewhere"])
    assert err.value.code == 2


def test_seedless_randomcam_exits_2(tmp_path):
    put_image(tmp_path / "a.ppm", 0)
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--images", str(tmp_path), "--method", "randomcam"])
    assert err.value.code == 2


def test_bad_thread_env_exits_2(tmp_path, monkeypatch):
    put_image(tmp_path / "a.ppm", 0)
    monkeypatch.setenv("CRG_THREADS", "three")
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--images", str(tmp_path), "--method", "gradcam"])
    assert err.value.code == 2


def test_evaluate_empty_dir_exits_1(tmp_path, capsys):
    assert main(["evaluate", "--images", str(tmp_path),
                 "--method", "gradcam"]) == 1
    assert "no images" in capsys.readouterr().err


def test_explain_writes_three_files(tmp_path):
    put_image(tmp_path / "sample.ppm", 3)
    out = tmp_path / "out"
    code = main(["explain", "--image", str(tmp_path / "sample.ppm"),
                 "--method", "shapleycam", "--utility", "rest",
                 "--arch", "cnn-smooth", "--classes", "3", "--seed", "7",
                 "--out-dir", str(out)])
    assert code == 0
    heat = out / "sample.shapleycam.heatmap.ppm"
    over = out / "sample.shapleycam.overlay.ppm"
    side = out / "sample.shapleycam.json"
    assert heat.exists() and over.exists() and side.exists()

    for path in (heat, over):
        img = read_image(path)
        assert img.channels == 3
        assert (img.height, img.width) == (6, 6)

    meta = json.loads(side.read_text())
    assert meta["method"] == "shapleycam"
    assert meta["utility"] == "rest"
    assert meta["arch"] == "cnn-smooth"
    assert meta["spatial"] == [4, 4]
    assert len(meta["pre_relu"]) == 16


def test_explain_default_class_is_argmax(tmp_path):
    pixels = put_image(tmp_path / "pick.ppm", 11)
    assert main(["explain", "--image", str(tmp_path / "pick.ppm"),
                 "--method", "gradcam", "--arch", "cnn-smooth",
                 "--classes", "5", "--seed", "2"]) == 0
    meta = json.loads((tmp_path / "pick.gradcam.json").read_text())
    model = build_model("cnn-smooth", num_classes=5, seed=2)
    assert meta["target_class"] == int(np.argmax(model.forward(pixels)))


def test_explain_outputs_are_deterministic(tmp_path):
    put_image(tmp_path / "s.ppm", 4)
    blobs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert main(["explain", "--image", str(tmp_path / "s.ppm"),
                     "--method", "randomcam", "--method-seed", "13",
                     "--seed", "1", "--out-dir", str(out)]) == 0
        blobs.append(tuple((out / f"s.randomcam.{kind}").read_bytes()
                           for kind in ("heatmap.ppm", "overlay.ppm", "json")))
    assert blobs[0] == blobs[1]


def test_evaluate_report_and_csv(tmp_path):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(3):
        put_image(img_dir / f"img{i}.ppm", 20 + i)
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    code = main(["evaluate", "--images", str(img_dir), "--method", "gradcam",
                 "--utility", "post-softmax", "--arch", "cnn-smooth",
                 "--seed", "7", "--report", str(report_path),
                 "--csv", str(csv_path)])
    assert code == 0

    report = json.loads(report_path.read_text())
    assert sorted(report) == ["ad", "adcc", "add", "arch", "coherency",
                              "complexity", "ic", "method", "n_images",
                              "utility"]
    assert report["n_images"] == 3
    assert report["method"] == "gradcam"

    header, row = csv_path.read_text().splitlines()
    assert header.split(",")[:4] == ["method", "utility", "arch", "n_images"]
    cells = row.split(",")
    assert cells[0] == "gradcam"
    assert float(cells[4]) == report["ad"]
    assert float(cells[7]) == report["adcc"]


def test_evaluate_deterministic_across_threads(tmp_path, monkeypatch):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(4):
        put_image(img_dir / f"img{i}.ppm", 30 + i)
    args = ["evaluate", "--images", str(img_dir), "--method", "randomcam",
            "--method-seed", "9", "--arch", "cnn-smooth", "--seed", "7"]

    monkeypatch.setenv("CRG_THREADS", "3")
    assert main(args + ["--report", str(tmp_path / "a.json")]) == 0
    monkeypatch.delenv("CRG_THREADS")
    assert main(args + ["--report", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_evaluate_limit_flag(tmp_path):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(5):
        put_image(img_dir / f"img{i}.ppm", 40 + i)
    report_path = tmp_path / "r.json"
    assert main(["evaluate", "--images", str(img_dir), "--method", "gradcam",
                 "--limit", "2", "--report", str(report_path)]) == 0
    assert json.loads(report_path.read_text())["n_images"] == 2


def test_suite_reports_are_byte_identical(tmp_path):
    paths = [tmp_path / name for name in ("h1.json", "h2.json")]
    for path in paths:
        assert main(["hvp-check", "--graphs", "15",
                     "--report", str(path)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    report = json.loads(paths[0].read_text())
    assert report["pass"] is True
    assert report["n_graphs"] == 15


def test_shapley_verify_fast_variant(tmp_path):
    report_path = tmp_path / "sv.json"
    assert main(["shapley-verify", "--mc-seeds", "2", "--mc-samples", "4000",
                 "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["pass"] is True
    assert report["mc"]["samples"] == 4000


def test_theorem_check_exit_0(tmp_path, capsys):
    report_path = tmp_path / "thm.json"
    assert main(["theorem-check", "--seeds", "1",
                 "--report", str(report_path)]) == 0
    assert "theorem-check: PASS" in capsys.readouterr().err
    assert json.loads(report_path.read_text())["pass"] is True


def test_report_goes_to_stdout_without_flag(capsys):
    assert main(["hvp-check", "--graphs", "3"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out)["suite"] == "hvp-check"


def test_bad_image_file_exits_1(tmp_path, capsys):
    bad = tmp_path / "broken.ppm"
    bad.write_bytes(b"P6\n4 4\n255\nshort")
    code = main(["explain", "--image", str(bad), "--method", "gradcam"])
    assert code == 1
    assert "error:" in capsys.readouterr().err
