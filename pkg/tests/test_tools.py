import json
import os

import numpy as np
import pytest
import yaml

from cgs.api.fixture import VEHICLE_ID, generate_fixture, write_fixture
from cgs.api.sceneio import SceneBundle, load_scene, save_field, save_scene, write_image
from cgs.tools import edit_scene, evaluate, ingest_asset, list_assets, reconstruct, render_scene, synth_fixture

from conftest import make_camera, random_field


def save_bundle(tmp_path) -> str:
    field = random_field(30, seed=1)
    field.provenance[[3, 4]] = "sign"
    directory = os.path.join(str(tmp_path), "bundle")
    save_scene(directory, SceneBundle(field, rig=[make_camera(timestep=t) for t in range(2)]))
    return directory


def write_script(tmp_path, operations) -> str:
    path = os.path.join(str(tmp_path), "edit.json")
    with open(path, "w") as fp:
        json.dump({"version": 1, "operations": operations}, fp)
    return path


def test_edit_unknown_object(tmp_path, capsys):
    bundle = save_bundle(tmp_path)
    script = write_script(tmp_path, [{"type": "remove", "object_id": "ghost"}])
    out = os.path.join(str(tmp_path), "edited")
    code = edit_scene.sys_main(["-b", bundle, "-s", script, "-o", out, "--bank", os.path.join(str(tmp_path), "bank")])
    assert code == 3
    err = capsys.readouterr().err
    assert "cgs-edit: " in err
    assert "ghost" in err
    assert not os.path.exists(out)


def test_edit_remove(tmp_path):
    bundle = save_bundle(tmp_path)
    script = write_script(tmp_path, [{"type": "remove", "object_id": "sign"}])
    out = os.path.join(str(tmp_path), "edited")
    pairs = os.path.join(str(tmp_path), "pairs")
    code = edit_scene.sys_main(["-b", bundle, "-s", script, "-o", out, "--inpaint_dir", pairs,
                                "--bank", os.path.join(str(tmp_path), "bank")])
    assert code == 0
    edited = load_scene(out)
    assert len(edited.static) == 28
    assert edited.history[-1]["type"] == "remove"
    assert os.path.exists(os.path.join(pairs, "cam0_t000_mask.png"))


def test_edit_missing_bundle(tmp_path):
    script = write_script(tmp_path, [])
    code = edit_scene.sys_main(["-b", os.path.join(str(tmp_path), "none"), "-s", script,
                                "-o", os.path.join(str(tmp_path), "out")])
    assert code == 1


def test_render(tmp_path):
    bundle = save_bundle(tmp_path)
    out = os.path.join(str(tmp_path), "render")
    assert render_scene.sys_main(["-b", bundle, "-o", out, "--t", "1"]) == 0
    assert sorted(os.listdir(out)) == ["cam0_t001.pfm", "cam0_t001.png"]


def test_render_bad_range(tmp_path, capsys):
    bundle = save_bundle(tmp_path)
    code = render_scene.sys_main(["-b", bundle, "-o", os.path.join(str(tmp_path), "render"), "--t", "x:y"])
    assert code == 3
    assert "x:y" in capsys.readouterr().err


def test_reconstruct_missing_scene(tmp_path):
    code = reconstruct.sys_main(["-s", os.path.join(str(tmp_path), "scene.json"),
                                 "-o", os.path.join(str(tmp_path), "out")])
    assert code == 1


def test_evaluate_prints(tmp_path, capsys):
    pred = os.path.join(str(tmp_path), "pred")
    gt = os.path.join(str(tmp_path), "gt")
    os.makedirs(pred)
    os.makedirs(gt)
    image = np.full((8, 8, 3), 0.25)
    write_image(os.path.join(pred, "v.png"), image)
    write_image(os.path.join(gt, "v.png"), image)
    assert evaluate.sys_main(["-p", pred, "-g", gt]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("v: psnr=")
    assert lines[-1].startswith("mean: psnr=")
    report = os.path.join(str(tmp_path), "metrics.json")
    assert evaluate.sys_main(["-p", pred, "-g", gt, "-r", report, "--timing"]) == 0
    with open(report) as fp:
        assert json.load(fp)["runtime"] is not None


def test_ingest_and_list(tmp_path, capsys):
    bank = os.path.join(str(tmp_path), "bank")
    path = os.path.join(str(tmp_path), "asset.ply")
    save_field(path, random_field(10, seed=4, depth=(-1.0, 1.0), spread=1.0))
    code = ingest_asset.sys_main(["-i", path, "-a", "sedan", "--category", "vehicle", "-e", "4", "1.6", "1.8",
                                  "--bank", bank])
    assert code == 0
    assert "sedan: vehicle, 1 frame(s)" in capsys.readouterr().out
    assert list_assets.sys_main(["--bank", bank]) == 0
    out = capsys.readouterr().out
    assert out.startswith("sedan\n")
    assert "4.000 x 1.600 x 1.800" in out


def test_ingest_missing_asset(tmp_path, capsys):
    code = ingest_asset.sys_main(["-i", os.path.join(str(tmp_path), "missing.ply"), "-a", "x", "--category",
                                  "vehicle", "-e", "1", "1", "1", "--bank", os.path.join(str(tmp_path), "bank")])
    assert code == 1


@pytest.mark.slow
def test_synth_fixture(tmp_path):
    out = os.path.join(str(tmp_path), "fixture")
    assert synth_fixture.sys_main(["-o", out, "--seed", "3"]) == 0
    with open(os.path.join(out, "scene.json")) as fp:
        manifest = json.load(fp)
    assert manifest["seed"] == 3
    assert len(os.listdir(os.path.join(out, "images"))) == 48
    assert len(os.listdir(os.path.join(out, "holdout"))) == len(manifest["holdout"])


def tree_bytes(directory: str) -> dict:
    result = {}
    for root, _, files in os.walk(directory):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fp:
                result[os.path.relpath(path, directory)] = fp.read()
    return result


@pytest.mark.slow
def test_pipeline_is_deterministic_across_runs_and_threads(tmp_path):
    base = str(tmp_path)
    scene_dir = os.path.join(base, "scene")
    write_fixture(scene_dir, generate_fixture())
    config = os.path.join(base, "config.yaml")
    with open(config, "w") as fp:
        yaml.safe_dump({"train": {"total_iterations": 10}, "incremental": {"n_bins": 2},
                        "graph": {"node_iterations": 3, "node_init_points": 100}}, fp)
    script = write_script(tmp_path, [{"type": "remove", "object_id": VEHICLE_ID}])
    bank = os.path.join(base, "bank")
    trees = []
    for run, threads in enumerate(["1", "1", "8"]):
        bundle = os.path.join(base, "bundle%d" % run)
        edited = os.path.join(base, "edited%d" % run)
        frames = os.path.join(base, "frames%d" % run)
        assert reconstruct.sys_main(["-s", os.path.join(scene_dir, "scene.json"), "-o", bundle, "-c", config,
                                     "-t", threads]) == 0
        assert edit_scene.sys_main(["-b", bundle, "-s", script, "-o", edited, "-c", config, "-t", threads,
                                    "--bank", bank]) == 0
        assert render_scene.sys_main(["-b", edited, "-o", frames, "-c", config, "-t", threads]) == 0
        trees.append([tree_bytes(d) for d in (bundle, edited, frames)])
    assert trees[0] == trees[1]
    assert trees[0] == trees[2]
