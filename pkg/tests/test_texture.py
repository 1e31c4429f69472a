import numpy as np
import pytest

from cgs.api.core import DimensionMismatch, EmptyMask, InvalidDepth
from cgs.api.gaussians import GaussianField
from cgs.api.rasterizer import render
from cgs.api.texture import backproject_texture, equalize_depth, normals_from_depth, point_map, surface_normals

from conftest import make_camera


def test_equalize_constant_row():
    depth = np.full((4, 5), 3.0)
    mask = np.zeros((4, 5), dtype=bool)
    mask[1, 1:4] = True
    np.testing.assert_array_equal(equalize_depth(depth, mask), depth)


def test_equalize_row_mean():
    depth = np.zeros((2, 3))
    depth[0] = [1.0, 2.0, 3.0]
    depth[1] = [7.0, 8.0, 9.0]
    mask = np.array([[True, True, True], [False, True, True]])
    result = equalize_depth(depth, mask)
    np.testing.assert_allclose(result[0], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(result[1], [7.0, 8.5, 8.5])


def test_equalize_keeps_unmasked_bits():
    rng = np.random.default_rng(0)
    depth = rng.uniform(1.0, 10.0, (8, 8))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 2:5] = True
    result = equalize_depth(depth, mask)
    np.testing.assert_array_equal(result[~mask], depth[~mask])


@pytest.mark.parametrize("seed", range(100))
def test_equalize_random_masks(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 24, 2)
    depth = rng.uniform(0.5, 80.0, (h, w))
    mask = rng.random((h, w)) < rng.uniform(0.05, 0.95)
    mask[rng.integers(h), rng.integers(w)] = True
    result = equalize_depth(depth, mask)
    np.testing.assert_array_equal(result[~mask], depth[~mask])
    for row in np.flatnonzero(mask.any(axis=1)):
        assert np.var(result[row, mask[row]]) == 0.0


def test_equalize_errors():
    with pytest.raises(DimensionMismatch):
        equalize_depth(np.zeros((3, 3)), np.ones((3, 4), dtype=bool))
    with pytest.raises(EmptyMask):
        equalize_depth(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))


def test_normals_constant_depth():
    n = normals_from_depth(np.full((6, 6), 4.0))
    np.testing.assert_allclose(n[1:-1, 1:-1], np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)), atol=1e-12)


def test_normals_ramp_sobel_gain():
    a = 0.05
    depth = a * np.arange(10)[None, :] * np.ones((10, 1))
    n = normals_from_depth(depth)
    np.testing.assert_allclose(n[2:-2, 2:-2, 0] / n[2:-2, 2:-2, 2], 8.0 * a, atol=1e-12)
    np.testing.assert_allclose(n[2:-2, 2:-2, 1], 0.0, atol=1e-12)


def test_point_map_principal_point():
    cam = make_camera(width=33, height=33)
    depth = np.full((33, 33), 5.0)
    points = point_map(depth, cam)
    np.testing.assert_allclose(points[16, 16], cam.cam_to_world_points(np.array([[0.0, 0.0, 5.0]]))[0], atol=1e-12)


def test_surface_normals_of_ground_point_up():
    cam = make_camera(eye=(0.0, 1.5, 0.0), target=(0.0, 0.0, 6.0))
    # depth of the plane y = 0 seen from the camera
    v, u = np.mgrid[0:32, 0:32].astype(float)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1) @ cam.rotation
    depth = np.where(rays[..., 1] < -1e-6, 1.5 / np.maximum(-rays[..., 1], 1e-6), 0.0)
    valid = depth > 0
    points = point_map(np.where(valid, depth, 1.0), cam)
    normals = surface_normals(points, cam)
    inner = valid.copy()
    inner[:, [0, -1]] = False
    inner[[0, -1], :] = False
    inner[:-1] &= valid[1:]
    inner[1:] &= valid[:-1]
    assert inner.sum() > 50
    np.testing.assert_allclose(normals[inner], np.broadcast_to([0.0, 1.0, 0.0], (inner.sum(), 3)), atol=1e-6)


def flat_view():
    cam = make_camera(width=33, height=33)
    depth = np.full((33, 33), 5.0)
    mask = np.zeros((33, 33), dtype=bool)
    mask[8:25, 8:25] = True
    edited = np.zeros((33, 33, 3))
    edited[..., 0] = np.linspace(0.4, 0.6, 33)[None, :]
    edited[..., 1] = 0.3
    edited[..., 2] = 0.7
    return cam, depth, mask, edited


def test_backproject_center_pixel():
    cam, depth, _, edited = flat_view()
    mask = np.zeros((33, 33), dtype=bool)
    mask[16, 16] = True
    patch = backproject_texture(edited, mask, depth, cam)
    assert len(patch) == 1
    np.testing.assert_allclose(cam.world_to_cam_points(patch.positions)[0], [0.0, 0.0, 5.0], atol=1e-12)
    assert patch.provenance[0] == "texture"


def test_backproject_counts():
    cam, depth, mask, edited = flat_view()
    assert len(backproject_texture(edited, mask, depth, cam)) == int(mask.sum())
    assert len(backproject_texture(edited, mask, depth, cam, stride=2)) == int((mask[::2, ::2]).sum())


def test_backproject_lies_flat():
    cam, depth, mask, edited = flat_view()
    patch = backproject_texture(edited, mask, depth, cam)
    # the thin axis of every covariance points along the optical axis
    w, v = np.linalg.eigh(patch.world_covariances())
    np.testing.assert_allclose(np.abs(v[:, :, 0] @ cam.forward), 1.0, atol=1e-9)


def test_backproject_roundtrip_render():
    cam, depth, mask, edited = flat_view()
    patch = backproject_texture(edited, mask, equalize_depth(depth, mask), cam)
    patch.background = np.array([0.5, 0.5, 0.5])
    out = render(patch, cam)
    error = np.abs(out.color[mask] - edited[mask]).mean()
    assert error < 0.05
    assert out.alpha[mask].min() > 0.95


def test_backproject_over_scene():
    cam, depth, mask, edited = flat_view()
    scene = GaussianField.from_points(cam.cam_to_world_points(np.array([[0.0, 0.0, 6.0]])), [[0.1, 0.9, 0.1]],
                                      scale=2.0, opacity=0.9)
    patch = backproject_texture(edited, mask, depth, cam)
    out = render(GaussianField.concat([scene, patch]), cam)
    assert np.abs(out.color[mask] - edited[mask]).mean() < 0.05


def test_backproject_errors():
    cam, depth, mask, edited = flat_view()
    bad = depth.copy()
    bad[16, 16] = 0.0
    with pytest.raises(InvalidDepth):
        backproject_texture(edited, mask, bad, cam)
    with pytest.raises(EmptyMask):
        backproject_texture(edited, np.zeros_like(mask), depth, cam)
    with pytest.raises(DimensionMismatch):
        backproject_texture(edited, mask[:-1], depth, cam)
