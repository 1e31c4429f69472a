import numpy as np
import pytest

from cgs.api.core import InsufficientFrames, NoVisibility, ParseError
from cgs.api.gaussians import GaussianField
from cgs.api.incremental import (BinSchedule, IncrementalConfig, bins_from_depth_range, fuse_bin, partition_bins,
                                 supervision_weights, train_incremental, view_weights)
from cgs.api.lidar import PointCloud
from cgs.api.optimizer import TrainConfig
from cgs.api.rasterizer import render

from conftest import make_camera, random_field


def frames_over(n_timesteps, cameras_per_step=1):
    result = []
    for t in range(n_timesteps):
        for c in range(cameras_per_step):
            cam = make_camera(eye=(0.1 * t, 0.0, 0.0), target=(0.1 * t, 0.0, 3.0), width=16, height=16, focal=15.0,
                              timestep=t, camera_id="cam%d" % c)
            result.append((np.zeros((16, 16, 3)), cam))
    return result


def ranges(schedule):
    return [(b.t_start, b.t_end) for b in schedule.bins]


def test_single_bin():
    schedule = partition_bins(frames_over(9), 1)
    assert ranges(schedule) == [(0, 8)]
    assert len(schedule.bins[0].frames) == 9


def test_three_bins_with_overlap():
    schedule = partition_bins(frames_over(9, cameras_per_step=2), 3, overlap=1)
    assert ranges(schedule) == [(0, 2), (2, 5), (5, 8)]
    assert schedule.bins[1].overlap_frames_with_previous == 2
    assert len(schedule.bins[1].frames) == 8


def test_too_many_bins():
    with pytest.raises(InsufficientFrames):
        partition_bins(frames_over(3), 4)


def test_bins_need_overlap():
    with pytest.raises(InsufficientFrames):
        partition_bins(frames_over(6), 2, overlap=0)


def test_schedule_roundtrip():
    frames = frames_over(9)
    schedule = partition_bins(frames, 3)
    restored = BinSchedule.from_dict(schedule.to_dict(), frames)
    assert ranges(restored) == ranges(schedule)
    assert [len(b.frames) for b in restored.bins] == [len(b.frames) for b in schedule.bins]


def test_bins_from_depth_range():
    cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 95.0]]))
    assert bins_from_depth_range(cloud, 30.0) == 4
    assert bins_from_depth_range(PointCloud(np.zeros((0, 3)))) == 1


def test_fuse_with_empty_bin():
    acc = random_field(5)
    fused = fuse_bin(acc, GaussianField.empty())
    np.testing.assert_array_equal(fused.positions, acc.positions)


def test_fuse_cardinality_and_freeze():
    acc = random_field(5, seed=1)
    new = random_field(3, seed=2)
    fused = fuse_bin(acc, new)
    assert len(fused) == 8
    assert fused.position_frozen.tolist() == [True] * 5 + [False] * 3
    np.testing.assert_array_equal(fused.positions[5:], new.positions)


def test_view_weight_single_camera():
    cam = make_camera()
    np.testing.assert_allclose(view_weights(np.array([0.0, 0.0, 5.0]), [cam]), [1.0])


def test_view_weight_symmetric():
    p = np.array([0.0, 0.0, 5.0])
    a = make_camera(eye=(-1.0, 0.0, 0.0), target=(-1.0, 0.0, 5.0))
    b = make_camera(eye=(1.0, 0.0, 0.0), target=(1.0, 0.0, 5.0))
    np.testing.assert_allclose(view_weights(p, [a, b]), [0.5, 0.5], atol=1e-12)


def test_view_weight_inverse_square():
    p = np.array([0.0, 0.0, 8.0])
    near = make_camera(eye=(0.0, 0.0, 4.0), target=(0.0, 0.0, 8.0))
    far = make_camera(eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 8.0))
    w = view_weights(p, [near, far])
    assert w[0] / w[1] == pytest.approx(4.0)


def test_view_weight_invisible():
    behind = make_camera(eye=(0.0, 0.0, 10.0), target=(0.0, 0.0, 20.0))
    with pytest.raises(NoVisibility):
        view_weights(np.array([0.0, 0.0, 5.0]), [behind])


def test_supervision_weights_have_mean_one():
    field = random_field(20)
    cams = [make_camera(eye=(x, 0.0, 0.0), target=(x, 0.0, 3.0)) for x in [-0.5, 0.0, 2.0]]
    w = supervision_weights(field, cams)
    assert w.mean() == pytest.approx(1.0)
    assert np.all(w >= 0)


def test_config_validation():
    with pytest.raises(ParseError):
        IncrementalConfig.from_dict({"n_bins": 0})
    with pytest.raises(ParseError):
        IncrementalConfig.from_dict({"bins": 2})


def test_train_incremental_bins_add_gaussians():
    truth = random_field(30, seed=5, spread=0.6)
    frames = []
    for t in range(4):
        cam = make_camera(eye=(0.1 * t, 0.0, 0.0), target=(0.1 * t, 0.0, 3.0), width=16, height=16, focal=15.0,
                          timestep=t)
        frames.append((render(truth, cam).color, cam))
    cloud = PointCloud(truth.positions, np.full((30, 3), 0.5), timesteps=np.repeat(np.arange(3), 10))
    schedule = partition_bins(frames, 2)
    cfg = TrainConfig(total_iterations=8, densify=False, freeze_iterations=2)
    seen = []
    result = train_incremental(cloud, schedule, cfg, background=truth.background,
                               on_bin=lambda b, field: seen.append((b.index, len(field))))
    assert len(result.field) == 30
    assert result.field.position_frozen is None
    assert [r.iteration for r in result.history] == list(range(1, 9))
    np.testing.assert_array_equal(result.field.background, truth.background)
    assert [index for index, _ in seen] == [0, 1]
    assert seen[0][1] < seen[1][1] == 30
