import json
import os

import numpy as np
import pytest

from cgs.api.core import ParseError, VersionMismatch
from cgs.api.fixture import HOLDOUT_TIMESTEPS, N_TIMESTEPS, VEHICLE_ID, generate_fixture, write_fixture
from cgs.api.graph import BBoxTrack, GraphConfig, box_mask
from cgs.api.incremental import INIT_RANDOM, IncrementalConfig
from cgs.api.losses import ssim
from cgs.api.metrics import psnr
from cgs.api.optimizer import TrainConfig
from cgs.api.pipeline import (evaluate, ignore_masks, load_scene_input, parse_timesteps, reconstruct, render_bundle,
                              render_view, scene_at)
from cgs.api.rasterizer import render
from cgs.api.sceneio import SceneBundle, read_depth, read_image
from cgs.api.weather import WeatherTrajectory, spawn_weather

from conftest import make_camera, random_field


def test_parse_timesteps():
    assert parse_timesteps(None) is None
    assert parse_timesteps(" ") is None
    assert parse_timesteps("5") == [5]
    assert parse_timesteps("2:5") == [2, 3, 4, 5]
    assert parse_timesteps("1,3,5") == [1, 3, 5]
    with pytest.raises(ParseError):
        parse_timesteps("a:b")


def test_ignore_masks():
    track = BBoxTrack.static("car", (0.0, 0.0, 3.0), 0.0, (1.0, 1.0, 1.0), 0, 5)
    cams = [make_camera(timestep=2), make_camera(timestep=8)]
    masks = ignore_masks([(np.zeros((32, 32, 3)), c) for c in cams], {"car": track})
    assert list(masks.keys()) == [("cam0", 2)]
    mask = masks[("cam0", 2)]
    assert mask[16, 16]
    assert not mask[0, 0]


def test_scene_at_adds_weather():
    bundle = SceneBundle(random_field(10))
    bundle.weather.append(spawn_weather("rain", ((-1.0, 0.0, 2.0), (1.0, 2.0, 4.0)), 20, seed=1,
                                        trajectory=WeatherTrajectory("constant_fall", {"v": -0.2})))
    assert len(scene_at(bundle, 3)) == 30
    assert len(scene_at(bundle, 3, weather=False)) == 10


def test_render_bundle(tmp_path):
    bundle = SceneBundle(random_field(20, seed=2))
    cams = [make_camera(timestep=t) for t in range(3)]
    out = os.path.join(str(tmp_path), "render")
    names = render_bundle(bundle, cams, out, timesteps=[1])
    assert names == ["cam0_t001"]
    assert read_image(os.path.join(out, "cam0_t001.png")).shape == (32, 32, 3)
    assert read_depth(os.path.join(out, "cam0_t001.pfm")).shape == (32, 32)
    assert not os.path.exists(os.path.join(out, "cam0_t000.png"))


def write_manifest(tmp_path, manifest) -> str:
    path = os.path.join(str(tmp_path), "scene.json")
    with open(path, "w") as fp:
        json.dump(manifest, fp)
    return path


def test_load_scene_input_errors(tmp_path):
    with pytest.raises(IOError):
        load_scene_input(os.path.join(str(tmp_path), "scene.json"))
    with pytest.raises(ParseError):
        load_scene_input(write_manifest(tmp_path, {"rig": "rig.json", "images": "images"}))
    with pytest.raises(VersionMismatch):
        load_scene_input(write_manifest(tmp_path, {"version": 2, "rig": "r", "images": "i", "lidar": "l"}))


def test_fixture_is_deterministic():
    a = generate_fixture(3)
    b = generate_fixture(3)
    np.testing.assert_array_equal(a.static.positions, b.static.positions)
    np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
    assert not np.array_equal(generate_fixture(4).cloud.positions, a.cloud.positions)


def test_fixture_layout():
    fixture = generate_fixture()
    assert len(fixture.cameras) == 4 * N_TIMESTEPS
    assert fixture.holdout == ["front_t%03d" % t for t in HOLDOUT_TIMESTEPS]
    assert list(fixture.graph.nodes.keys()) == [VEHICLE_ID]
    assert set(np.unique(fixture.cloud.timesteps)) == set(range(N_TIMESTEPS))


@pytest.mark.slow
def test_reconstruct_fixture(tmp_path):
    directory = os.path.join(str(tmp_path), "fixture")
    write_fixture(directory, generate_fixture())
    scene = load_scene_input(os.path.join(directory, "scene.json"))
    assert len(scene.holdout) == len(HOLDOUT_TIMESTEPS)
    assert len(scene.frames) == 4 * N_TIMESTEPS - len(HOLDOUT_TIMESTEPS)
    bundle, history = reconstruct(scene, TrainConfig(total_iterations=20), inc=IncrementalConfig(n_bins=2),
                                  gcfg=GraphConfig(node_iterations=5, node_init_points=200))
    assert list(bundle.graph.nodes.keys()) == [VEHICLE_ID]
    assert bundle.history[-1]["type"] == "reconstruct"
    assert len(bundle.schedule.bins) == 2
    assert len(history) > 0
    pred = os.path.join(str(tmp_path), "pred")
    render_bundle(bundle, [cam for _, cam in scene.holdout], pred)
    report = evaluate(pred, os.path.join(directory, "holdout"), config={"train": {"total_iterations": 20}})
    assert len(report.per_view) == len(HOLDOUT_TIMESTEPS)
    assert np.isfinite(report.mean_psnr)
    assert report.mean_psnr > 5.0
    assert report.config["train"]["total_iterations"] == 20


def mean_psnr(frames, render_fn) -> float:
    return float(np.mean([psnr(render_fn(cam).color, image) for image, cam in frames]))


@pytest.fixture(scope="module")
def fixture_scene(tmp_path_factory):
    directory = str(tmp_path_factory.mktemp("fixture"))
    write_fixture(directory, generate_fixture(7))
    return load_scene_input(os.path.join(directory, "scene.json"))


def reconstruct_fixture(scene, iterations=2000, **kwargs):
    bundle, _ = reconstruct(scene, TrainConfig(total_iterations=iterations), inc=IncrementalConfig(n_bins=3), **kwargs)
    return bundle


@pytest.fixture(scope="module")
def baseline(fixture_scene):
    """
    LiDAR initialized, dynamic and incremental: the reference the ablations compare against.
    """
    snapshots = dict()
    bundle = reconstruct_fixture(fixture_scene, on_bin=lambda b, f: snapshots.setdefault(b.index, f.copy()))
    return bundle, snapshots


@pytest.mark.slow
def test_fixture_reaches_target_quality(fixture_scene):
    bundle = reconstruct_fixture(fixture_scene, iterations=5000)
    psnrs, ssims = [], []
    for image, cam in fixture_scene.holdout:
        color = render_view(bundle, cam).color
        psnrs.append(psnr(color, image))
        ssims.append(float(ssim(color, image)))
    assert np.mean(psnrs) >= 30.0
    assert np.mean(ssims) >= 0.90


@pytest.mark.slow
def test_lidar_init_beats_random_init(fixture_scene, baseline):
    bundle, _ = baseline
    random_bundle = reconstruct_fixture(fixture_scene, init=INIT_RANDOM)
    holdout = fixture_scene.holdout
    lidar_psnr = mean_psnr(holdout, lambda cam: render_view(bundle, cam))
    random_psnr = mean_psnr(holdout, lambda cam: render_view(random_bundle, cam))
    assert lidar_psnr >= random_psnr + 1.0


@pytest.mark.slow
def test_static_vehicle_loses_quality(fixture_scene, baseline):
    bundle, _ = baseline
    track = fixture_scene.tracks[VEHICLE_ID]
    frames = [(image, cam) for image, cam in fixture_scene.holdout if box_mask(track, cam, cam.timestep, margin=0).any()]
    assert len(frames) > 0
    static_bundle = reconstruct_fixture(fixture_scene, dynamic=False)
    dynamic_psnr = mean_psnr(frames, lambda cam: render_view(bundle, cam))
    static_psnr = mean_psnr(frames, lambda cam: render_view(static_bundle, cam))
    assert dynamic_psnr >= static_psnr + 2.0


@pytest.mark.slow
def test_incremental_binning_against_single_bin(fixture_scene, baseline):
    bundle, snapshots = baseline
    single = reconstruct_fixture(fixture_scene, single_bin=True)
    holdout = fixture_scene.holdout
    incremental_psnr = mean_psnr(holdout, lambda cam: render_view(bundle, cam))
    single_psnr = mean_psnr(holdout, lambda cam: render_view(single, cam))
    assert single_psnr <= incremental_psnr + 0.5
    # the views of the first bin must survive the later bins
    first = bundle.schedule.bins[0]
    assert len(snapshots) == len(bundle.schedule.bins)
    before = mean_psnr(first.frames, lambda cam: render(snapshots[first.index], cam))
    after = mean_psnr(first.frames, lambda cam: render(bundle.static, cam))
    assert after >= before - 1.0
