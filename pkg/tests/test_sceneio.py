import json
import logging
import os

import numpy as np
import pytest

from cgs.api.core import MissingReference, ParseError, VersionMismatch
from cgs.api.graph import BBoxTrack, GaussianGraph, TrackEntry, add_node
from cgs.api.incremental import partition_bins
from cgs.api.sceneio import (BUNDLE_MANIFEST, SceneBundle, load_field, load_scene, read_camera_rig, read_depth,
                             read_frames, read_image, read_mask, save_field, save_scene, view_id, write_camera_rig,
                             write_depth, write_image, write_mask)
from cgs.api.weather import WeatherTrajectory, spawn_weather

from conftest import make_camera, random_field


def test_field_roundtrip_is_exact(tmp_path):
    field = random_field(1000, seed=1)
    field.sh_degree_active = 2
    path = os.path.join(str(tmp_path), "field.ply")
    save_field(path, field)
    back = load_field(path)
    np.testing.assert_array_equal(back.positions, field.positions)
    np.testing.assert_array_equal(back.log_scales, field.log_scales)
    np.testing.assert_array_equal(back.rotations, field.rotations)
    np.testing.assert_array_equal(back.sh_coeffs, field.sh_coeffs)
    np.testing.assert_array_equal(back.opacity_logits, field.opacity_logits)
    assert back.sh_degree_active == 2


def test_field_float_precision(tmp_path):
    field = random_field(50, seed=2)
    path = os.path.join(str(tmp_path), "field.ply")
    save_field(path, field, precision="float")
    back = load_field(path)
    np.testing.assert_allclose(back.positions, field.positions, rtol=1e-6)
    np.testing.assert_allclose(back.sh_coeffs, field.sh_coeffs, rtol=1e-5, atol=1e-7)


def test_truncated_field(tmp_path):
    path = os.path.join(str(tmp_path), "field.ply")
    save_field(path, random_field(100, seed=3))
    with open(path, "rb") as fp:
        data = fp.read()
    with open(path, "wb") as fp:
        fp.write(data[:len(data) // 2])
    with pytest.raises(ParseError):
        load_field(path)


def test_missing_field(tmp_path):
    with pytest.raises(IOError):
        load_field(os.path.join(str(tmp_path), "nothing.ply"))


def test_image_roundtrip(tmp_path):
    image = np.random.default_rng(4).random((12, 10, 3))
    path = os.path.join(str(tmp_path), "img.png")
    write_image(path, image)
    back = read_image(path)
    assert back.shape == (12, 10, 3)
    assert np.abs(back - image).max() <= 0.5 / 255.0 + 1e-12


def test_mask_roundtrip(tmp_path):
    mask = np.random.default_rng(5).random((9, 7)) > 0.5
    path = os.path.join(str(tmp_path), "mask.png")
    write_mask(path, mask)
    np.testing.assert_array_equal(read_mask(path), mask)


def test_depth_roundtrip_is_exact(tmp_path):
    depth = np.random.default_rng(6).uniform(0.5, 80.0, (11, 13)).astype(np.float32)
    path = os.path.join(str(tmp_path), "depth.pfm")
    write_depth(path, depth)
    np.testing.assert_array_equal(read_depth(path), depth)


def test_depth_errors(tmp_path):
    path = os.path.join(str(tmp_path), "depth.pfm")
    with open(path, "wb") as fp:
        fp.write(b"PF\n2 2\n-1.0\n")
    with pytest.raises(ParseError):
        read_depth(path)
    with open(path, "wb") as fp:
        fp.write(b"Pf\n2 2\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(ParseError):
        read_depth(path)
    with pytest.raises(IOError):
        read_depth(os.path.join(str(tmp_path), "missing.pfm"))


def test_camera_rig_roundtrip(tmp_path):
    cams = [make_camera(eye=(x, 0.0, 0.0), target=(x, 0.5, 4.0), timestep=i, camera_id="front")
            for i, x in enumerate([0.0, 1.0])]
    path = os.path.join(str(tmp_path), "rig.json")
    write_camera_rig(path, cams)
    back = read_camera_rig(path)
    assert [view_id(c) for c in back] == ["front_t000", "front_t001"]
    np.testing.assert_array_equal(back[1].world_to_camera, cams[1].world_to_camera)
    np.testing.assert_array_equal(back[1].intrinsics, cams[1].intrinsics)


def test_camera_rig_malformed(tmp_path):
    path = os.path.join(str(tmp_path), "rig.json")
    with open(path, "w") as fp:
        json.dump([{"camera_id": "a", "K": [1, 2]}], fp)
    with pytest.raises(ParseError):
        read_camera_rig(path)


def test_read_frames(tmp_path):
    cam = make_camera(width=8, height=6, camera_id="left", timestep=3)
    write_image(os.path.join(str(tmp_path), "left_t003.png"), np.full((6, 8, 3), 0.2))
    frames = read_frames(str(tmp_path), [cam])
    assert frames[0][0].shape == (6, 8, 3)
    with pytest.raises(MissingReference):
        read_frames(str(tmp_path), [make_camera(camera_id="right")])


def make_bundle() -> SceneBundle:
    static = random_field(30, seed=7)
    static.provenance[5] = "texture"
    track = BBoxTrack("car", [TrackEntry(0, (0.0, 0.0, 10.0), 0.0, 0.0, (4.0, 1.6, 1.8)),
                              TrackEntry(4, (4.0, 0.0, 10.0), 0.3, 0.0, (4.0, 1.6, 1.8))])
    graph = add_node(GaussianGraph(), "car", random_field(8, seed=8, depth=(-0.5, 0.5)), track)
    cams = [make_camera(eye=(0.1 * t, 0.0, 0.0), target=(0.1 * t, 0.0, 3.0), timestep=t) for t in range(4)]
    schedule = partition_bins([(np.zeros((32, 32, 3)), c) for c in cams], 2)
    weather = [spawn_weather("snow", ((-5.0, 0.0, -5.0), (5.0, 4.0, 5.0)), 40, seed=11,
                             trajectory=WeatherTrajectory("constant_fall", {"v": -0.1}))]
    history = [{"operation": "remove", "object_id": "truck"}]
    return SceneBundle(static, graph, schedule, cams, history, weather)


def test_scene_roundtrip(tmp_path):
    bundle = make_bundle()
    directory = os.path.join(str(tmp_path), "scene")
    save_scene(directory, bundle)
    back = load_scene(directory)
    np.testing.assert_array_equal(back.static.positions, bundle.static.positions)
    np.testing.assert_array_equal(back.static.background, bundle.static.background)
    assert list(back.static.provenance) == list(bundle.static.provenance)
    assert list(back.graph.nodes.keys()) == ["car"]
    node = back.graph.nodes["car"]
    np.testing.assert_array_equal(node.frames[0].positions, bundle.graph.nodes["car"].frames[0].positions)
    assert set(node.frames[0].provenance) == {"car"}
    np.testing.assert_allclose(node.track.pose(2)[1], [2.0, 0.0, 10.0])
    assert [(b.t_start, b.t_end) for b in back.schedule.bins] == [(b.t_start, b.t_end) for b in bundle.schedule.bins]
    assert [view_id(c) for c in back.rig] == [view_id(c) for c in bundle.rig]
    assert back.history == bundle.history
    np.testing.assert_array_equal(back.weather[0].particles.positions, bundle.weather[0].particles.positions)
    assert back.weather[0].trajectory.name == "constant_fall"


def test_scene_save_is_deterministic(tmp_path):
    bundle = make_bundle()
    a = os.path.join(str(tmp_path), "a")
    b = os.path.join(str(tmp_path), "b")
    save_scene(a, bundle)
    save_scene(b, bundle)
    with open(os.path.join(a, BUNDLE_MANIFEST)) as fa, open(os.path.join(b, BUNDLE_MANIFEST)) as fb:
        assert fa.read() == fb.read()


def test_scene_missing_reference(tmp_path):
    directory = os.path.join(str(tmp_path), "scene")
    save_scene(directory, make_bundle())
    os.remove(os.path.join(directory, "nodes", "car", "frame_0000.ply"))
    with pytest.raises(MissingReference):
        load_scene(directory)


def edit_manifest(directory, **changes):
    path = os.path.join(directory, BUNDLE_MANIFEST)
    with open(path) as fp:
        manifest = json.load(fp)
    manifest.update(changes)
    with open(path, "w") as fp:
        json.dump(manifest, fp)


def test_scene_unknown_keys_warn(tmp_path, caplog):
    directory = os.path.join(str(tmp_path), "scene")
    save_scene(directory, make_bundle())
    edit_manifest(directory, comment="made by hand")
    with caplog.at_level(logging.WARNING, logger="cgs.api.sceneio"):
        back = load_scene(directory)
    assert len(back.static) == 30
    assert any("comment" in r.getMessage() for r in caplog.records)


def test_scene_version_mismatch(tmp_path):
    directory = os.path.join(str(tmp_path), "scene")
    save_scene(directory, make_bundle())
    edit_manifest(directory, version=99)
    with pytest.raises(VersionMismatch):
        load_scene(directory)


def test_scene_missing_manifest(tmp_path):
    with pytest.raises(IOError):
        load_scene(str(tmp_path))
