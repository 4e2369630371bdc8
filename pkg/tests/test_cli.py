"""End-to-end contracts of the command-line entry points."""
import json
import os

import numpy as np
import pytest

from splat360 import load_pfm, make_random_scene, save_scene
from splat360.cli import main


@pytest.fixture
def scene_file(tmp_path):
    scene = make_random_scene(5, seed=21, spread=0.3,
                              sigma_range=(0.05, 0.12))
    path = tmp_path / "scene.json"
    save_scene(str(path), scene)
    return str(path)


def _read_manifest(outdir):
    with open(os.path.join(outdir, "manifest.json")) as f:
        return json.load(f)


def _dir_bytes(d):
    return {name: open(os.path.join(d, name), "rb").read()
            for name in sorted(os.listdir(d))}


def test_render_writes_frames_and_manifest(tmp_path, scene_file):
    out = str(tmp_path / "r1")
    rc = main(["render", "--scene", scene_file, "--out", out,
               "--orbit", "ring:3", "--width", "24", "--height", "20"])
    assert rc == 0
    names = sorted(os.listdir(out))
    assert "frame_000.ppm" in names and "frame_002.ppm" in names
    assert "frame_001.camera.json" in names
    man = _read_manifest(out)
    assert man["command"] == "render"
    assert man["config"]["width"] == 24
    assert scene_file in man["inputs"]
    assert set(man["outputs"]) == set(names) - {"manifest.json"}


def test_render_rerun_byte_identical(tmp_path, scene_file):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    argv = ["render", "--scene", scene_file, "--orbit", "ring:2",
            "--width", "16", "--height", "16", "--depth", "--float-color"]
    assert main(argv + ["--out", a]) == 0
    assert main(argv + ["--out", b]) == 0
    assert _dir_bytes(a) == _dir_bytes(b)


def test_render_worker_count_does_not_change_frames(tmp_path, scene_file):
    a, b = str(tmp_path / "w1"), str(tmp_path / "w3")
    argv = ["render", "--scene", scene_file, "--orbit", "ring:2",
            "--width", "16", "--height", "16"]
    assert main(argv + ["--out", a, "--workers", "1"]) == 0
    assert main(argv + ["--out", b, "--workers", "3"]) == 0
    ba, bb = _dir_bytes(a), _dir_bytes(b)
    del ba["manifest.json"], bb["manifest.json"]  # records the worker count
    assert ba == bb


def test_render_camera_sidecar_reproduces_frame(tmp_path, scene_file):
    first = str(tmp_path / "first")
    again = str(tmp_path / "again")
    assert main(["render", "--scene", scene_file, "--out", first,
                 "--orbit", "ring:2", "--width", "16", "--height", "16"]) == 0
    cam_path = os.path.join(first, "frame_001.camera.json")
    assert main(["render", "--scene", scene_file, "--out", again,
                 "--camera", cam_path, "--width", "16", "--height", "16"]) == 0
    with open(os.path.join(first, "frame_001.ppm"), "rb") as f:
        want = f.read()
    with open(os.path.join(again, "frame_000.ppm"), "rb") as f:
        got = f.read()
    assert got == want


def test_render_bad_scene_exits_3_no_outputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"not\": \"a scene\"}")
    out = str(tmp_path / "nope")
    assert main(["render", "--scene", str(bad), "--out", out]) == 3
    assert not os.path.exists(os.path.join(out, "manifest.json"))


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["render"])  # --scene and --out are required
    assert exc.value.code == 2


def test_fit_self_targets_reports_zero(tmp_path, scene_file, capsys):
    tdir = str(tmp_path / "targets")
    assert main(["render", "--scene", scene_file, "--out", tdir,
                 "--orbit", "ring:2", "--width", "16", "--height", "16",
                 "--float-color"]) == 0
    fdir = str(tmp_path / "fit")
    rc = main(["fit", "--scene", scene_file, "--targets", tdir,
               "--out", fdir, "--iters", "2", "--lr", "0.05"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "final loss 0.000000e+00" in text
    rep = json.load(open(os.path.join(fdir, "fit_report.json")))
    assert rep["final_loss"] == 0.0
    assert rep["trace"] == [0.0, 0.0]
    fitted = open(os.path.join(fdir, "fitted_scene.json"), "rb").read()
    assert fitted == open(scene_file, "rb").read()
    per_view = open(os.path.join(fdir, "per_view.txt")).read()
    assert "99.0" in per_view


def test_fit_numeric_failure_exits_4_keeps_report(tmp_path, scene_file):
    tdir = str(tmp_path / "targets")
    assert main(["render", "--scene", scene_file, "--out", tdir,
                 "--orbit", "ring:1", "--width", "12", "--height", "12"]) == 0
    fdir = str(tmp_path / "boom")
    with np.errstate(all="ignore"):
        rc = main(["fit", "--scene", scene_file, "--targets", tdir,
                   "--out", fdir, "--iters", "3", "--lr", "1e200",
                   "--lambda-ssim", "0"])
    assert rc == 4
    rep = json.load(open(os.path.join(fdir, "fit_report.json")))
    assert "error" in rep
    assert not os.path.exists(os.path.join(fdir, "fitted_scene.json"))


def test_fit_lpips_flag_errors(tmp_path, scene_file):
    tdir = str(tmp_path / "targets")
    assert main(["render", "--scene", scene_file, "--out", tdir,
                 "--orbit", "ring:1", "--width", "12", "--height", "12"]) == 0
    rc = main(["fit", "--scene", scene_file, "--targets", tdir,
               "--out", str(tmp_path / "f2"), "--iters", "1", "--use-lpips"])
    assert rc == 2


def test_anchors_outputs(tmp_path, scene_file):
    out = str(tmp_path / "anc")
    rc = main(["anchors", "--scene", scene_file, "--out", out,
               "--width", "24", "--height", "24", "--k", "6",
               "--beta", "0.0"])
    assert rc == 0
    doc = json.load(open(os.path.join(out, "anchors.json")))
    probs = [a["prob"] for a in doc["anchors"]]
    assert len(probs) <= 6
    assert all(abs(p - 1.0 / len(probs)) < 1e-12 for p in probs)
    g = load_pfm(os.path.join(out, "grad_mag.pfm"))
    assert g.shape == (24, 24, 1)


def test_metrics_verb(tmp_path, scene_file, capsys):
    out = str(tmp_path / "m")
    assert main(["render", "--scene", scene_file, "--out", out,
                 "--orbit", "ring:1", "--width", "16", "--height", "16",
                 "--float-color"]) == 0
    img = os.path.join(out, "frame_000.pfm")
    mdir = str(tmp_path / "mm")
    capsys.readouterr()  # drop the render verb's progress line
    rc = main(["metrics", img, img, "--out", mdir])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["psnr_db"] == 99.0 and doc["ssim"] == 1.0
    saved = json.load(open(os.path.join(mdir, "metrics.json")))
    assert saved["psnr_db"] == 99.0


def test_metrics_missing_file_exits_3(tmp_path):
    rc = main(["metrics", str(tmp_path / "a.ppm"), str(tmp_path / "b.ppm")])
    assert rc == 3


def test_gradcheck_passes(capsys):
    rc = main(["gradcheck", "--draws", "5", "--seed", "0"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    tol = doc["tol"]
    assert doc["mlp"] < tol and doc["composite_loss"] < tol


def test_gradcheck_impossible_tolerance_exits_5():
    with np.errstate(all="ignore"):
        rc = main(["gradcheck", "--draws", "2", "--tol", "1e-18"])
    assert rc == 5


def test_bench_reports_fps(tmp_path, scene_file, capsys):
    rc = main(["bench", "--scene", scene_file, "--res", "24",
               "--frames", "2", "--gaussians", "5"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["fps"] > 0.0 and doc["frames"] == 2


def test_info_prints_versions(capsys):
    assert main(["info"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["version"] and "numpy" in doc


def test_drr_verb_and_manifest(tmp_path):
    from splat360 import make_sphere_phantom, save_volume
    vol = make_sphere_phantom(24, 1.0, 8.0)
    vpath = str(tmp_path / "sphere.vol")
    save_volume(vpath, vol)
    out = str(tmp_path / "drr")
    rc = main(["drr", "--volume", vpath, "--out", out,
               "--det-width", "33", "--det-height", "33",
               "--output", "line_integral"])
    assert rc == 0
    img = load_pfm(os.path.join(out, "drr.pfm"))
    assert img.shape == (33, 33, 1)
    # central ray crosses the full diameter of the water sphere
    assert abs(img[16, 16, 0] - 0.02 * 16.0) / (0.02 * 16.0) < 0.01
    man = _read_manifest(out)
    assert man["command"] == "drr"
    assert man["config"]["step_mm"] > 0.0
    assert len(man["inputs"]) == 2  # header and raw payload both hashed
