import json
import os

import numpy as np
import pytest

from qcsg.cli import main
from qcsg.dataset import load_dataset, save_dataset, validate_directory
from qcsg.errors import ValidationError
from qcsg.synthgen import get_scene, render_gt_views

TINY = ["--preset", "synthetic", "--set", "primitive_count=8", "--set", "convex_count=2",
        "--set", "n_random=16", "--set", "n_contour=32", "--set", "samples_per_ray=8",
        "--set", "phase_iters=[4, 4, 4]", "--set", "probe_count=512", "--set", "overlap_batch=128"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "sphere"
    assert main(["synth", "sphere", str(root), "--resolution", "24", "--gt-resolution", "48"]) == 0
    return root


@pytest.fixture(scope="module")
def fitted(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", str(dataset), "--out", str(out), "--mask-only", "--holdout", "3", *TINY]) == 0
    return out


def test_save_load_round_trip(tmp_path):
    views = render_gt_views(get_scene("box", 20))
    save_dataset(views, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == 4 and back.meta["scene"] == "box"
    for a, b in zip(views.views, back.views):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_allclose(a.camera.world_to_camera, b.camera.world_to_camera)


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "box", str(tmp_path / d), "--resolution", "16", "--gt-resolution", "32"]) == 0
    for rel in ("cameras.json", "images/000.png", "masks/003.png", "gt.ply"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_missing_mask_names_view(tmp_path):
    save_dataset(render_gt_views(get_scene("box", 16)), tmp_path)
    os.remove(tmp_path / "masks" / "002.png")
    problems = validate_directory(tmp_path)
    assert any("view 002" in p and "mask" in p for p in problems)
    with pytest.raises(ValidationError, match="002"):
        load_dataset(tmp_path)
    assert main(["fit", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_mask_size_mismatch(tmp_path):
    from PIL import Image

    save_dataset(render_gt_views(get_scene("box", 16)), tmp_path)
    Image.new("L", (8, 8)).save(tmp_path / "masks" / "001.png")
    assert any("view 001" in p and "size" in p for p in validate_directory(tmp_path))


def test_unknown_scene_exit_code(tmp_path, capsys):
    assert main(["synth", "teapot", str(tmp_path / "x")]) == 1
    assert "catalog" in capsys.readouterr().err


def test_bad_holdout_exit_code(dataset, tmp_path):
    assert main(["fit", str(dataset), "--out", str(tmp_path), "--holdout", "9", *TINY]) == 1


def test_gradcheck_exit_codes(capsys):
    small = ["--seeds", "1", "--coords", "20", "--P", "6", "--C", "2", "--views", "1", "--size", "6",
             "--rays-per-view", "4", "--samples", "6", "--probes", "8"]
    assert main(["grad-check", *small]) == 0
    assert main(["grad-check", "--corrupt", "intersect", *small]) == 2
    assert "node:intersect" in capsys.readouterr().out


def test_fit_outputs(fitted):
    for name in ("config.yaml", "phase1.dpa", "phase2.dpa", "assembly.dpa", "assembly.dpa.json", "report.json"):
        assert (fitted / name).exists(), name
    rep = json.loads((fitted / "report.json").read_text())
    assert rep["config"]["rgb"] is False
    assert [v["heldout"] for v in rep["views"]] == [False, False, False, True]


def test_resume_from_phase2(dataset, fitted, tmp_path):
    out = tmp_path / "resumed"
    assert main(["fit", str(dataset), "--out", str(out), "--mask-only", "--holdout", "3",
                 "--resume", str(fitted / "phase2.dpa"), *TINY]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["losses"]) == {"3"}


def test_extract_outputs(fitted, tmp_path):
    out = tmp_path / "mesh"
    assert main(["extract", str(fitted / "assembly.dpa"), str(out), "--resolution", "24",
                 "--scad", "polyhedron"]) == 0
    for name in ("merged.obj", "merged.ply", "parts.obj", "assembly.scad"):
        assert (out / name).exists(), name


def test_eval_report_identical(fitted, dataset, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["eval", str(fitted / "assembly.dpa"), str(dataset), "--resolution", "24",
                     "--json", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert rep["views"] == ["003"]


def test_eval_without_gt_is_partial(fitted, dataset, tmp_path):
    import shutil

    data = tmp_path / "nogt"
    shutil.copytree(dataset, data)
    (data / "gt.ply").unlink()
    out = tmp_path / "r.json"
    assert main(["eval", str(fitted / "assembly.dpa"), str(data), "--resolution", "24", "--json", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["cd"] is None and any("ground-truth" in n for n in rep["notes"])
