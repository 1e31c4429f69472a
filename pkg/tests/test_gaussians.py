"""Tests for the Gaussian primitives, cameras and projections."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from cgs.api.core import BehindCamera, DataError
from cgs.api.gaussians import (Camera, GaussianField, build_covariance, look_at, matrix_to_quaternion,
                               project_covariance, project_point, project_points, quaternion_to_matrix)

from conftest import make_camera, random_field


finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
quaternions = arrays(float, 4, elements=st.floats(-1.0, 1.0)).filter(lambda q: np.linalg.norm(q) > 0.1)


def identity_camera(width=100, height=100) -> Camera:
    return Camera.from_params(100.0, 100.0, 50.0, 50.0, np.eye(4), width, height)


def test_covariance_identity():
    np.testing.assert_allclose(build_covariance(np.zeros(3), np.array([1.0, 0, 0, 0])), np.eye(3), atol=1e-12)


def test_covariance_axis_scaling():
    cov = build_covariance(np.array([np.log(2.0), 0.0, 0.0]), np.array([1.0, 0, 0, 0]))
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


@settings(deadline=None, max_examples=50)
@given(arrays(float, 3, elements=finite), quaternions)
def test_covariance_matches_dense_product(log_scale, q):
    r = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    s = np.diag(np.exp(log_scale))
    expected = r @ s @ s.T @ r.T
    cov = build_covariance(log_scale, q)
    np.testing.assert_allclose(cov, expected, atol=1e-9 * max(1.0, np.abs(expected).max()))
    np.testing.assert_allclose(cov, cov.T, atol=1e-9)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


@settings(deadline=None, max_examples=30)
@given(arrays(float, 3, elements=st.floats(-1.0, 1.0)), quaternions)
def test_covariance_eigen_roundtrip(log_scale, q):
    cov = build_covariance(log_scale, q)
    w, v = np.linalg.eigh(cov)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, cov, atol=1e-8)


@settings(deadline=None, max_examples=30)
@given(quaternions)
def test_quaternion_matrix_roundtrip(q):
    m = quaternion_to_matrix(q)
    np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(quaternion_to_matrix(matrix_to_quaternion(m)), m, atol=1e-9)


def test_quaternion_to_matrix_is_scalar_first():
    half = np.sqrt(0.5)
    m = quaternion_to_matrix(np.array([half, 0.0, half, 0.0]))
    np.testing.assert_allclose(m, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]], atol=1e-12)
    # unnormalized and batched input
    batch = quaternion_to_matrix(np.tile([2.0, 0.0, 0.0, 0.0], (2, 3, 1)))
    assert batch.shape == (2, 3, 3, 3)
    np.testing.assert_allclose(batch, np.broadcast_to(np.eye(3), (2, 3, 3, 3)), atol=1e-12)
    assert quaternion_to_matrix(np.zeros((0, 4))).shape == (0, 3, 3)


def test_project_on_axis():
    pix, depth = project_point(np.array([0.0, 0.0, 1.0]), identity_camera())
    np.testing.assert_allclose(pix, [50.0, 50.0])
    assert depth == pytest.approx(1.0)


def test_project_offset_point():
    pix, _ = project_point(np.array([0.1, 0.0, 1.0]), identity_camera())
    np.testing.assert_allclose(pix, [60.0, 50.0])


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(np.array([0.0, 0.0, -1.0]), identity_camera())


def test_project_points_flags_instead_of_raising():
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    pix, depth, valid = project_points(pts, identity_camera())
    assert valid.tolist() == [True, False]
    np.testing.assert_allclose(pix[0], [50.0, 50.0])


@settings(deadline=None, max_examples=30)
@given(arrays(float, 3, elements=finite), quaternions, arrays(float, 3, elements=finite))
def test_projection_invariant_under_rigid_motion(p, q, t):
    cam = make_camera(eye=(0.3, -0.2, -4.0), target=(0.0, 0.0, 0.0))
    r = quaternion_to_matrix(q)
    motion = np.eye(4)
    motion[:3, :3] = r
    motion[:3, 3] = t
    moved = Camera(cam.intrinsics, cam.world_to_camera @ np.linalg.inv(motion), cam.width, cam.height)
    pix, depth = project_point(p, cam)
    pix2, depth2 = project_point(r @ p + t, moved)
    np.testing.assert_allclose(pix2, pix, atol=1e-9)
    assert depth2 == pytest.approx(depth, abs=1e-9)


def test_look_at_is_orthonormal():
    e = look_at((1.0, 2.0, 3.0), (-2.0, 0.5, 7.0))
    r = e[:3, :3]
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    cam = Camera.from_params(10, 10, 5, 5, e, 11, 11)
    np.testing.assert_allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)
    expected = np.array([-3.0, -1.5, 4.0]) / np.linalg.norm([-3.0, -1.5, 4.0])
    np.testing.assert_allclose(cam.forward, expected, atol=1e-12)


def test_camera_validate():
    e = np.eye(4)
    e[0, 0] = 2.0
    with pytest.raises(DataError):
        Camera.from_params(10, 10, 5, 5, e, 11, 11).validate()
    with pytest.raises(DataError):
        Camera.from_params(10, 10, 50, 5, np.eye(4), 11, 11).validate()


def test_project_covariance_isotropic_on_axis():
    sigma, z, f = 0.2, 4.0, 100.0
    cov2d = project_covariance(sigma ** 2 * np.eye(3), np.array([0.0, 0.0, z]), identity_camera())
    expected = ((f * sigma / z) ** 2 + 0.3) * np.eye(2)
    np.testing.assert_allclose(cov2d, expected, rtol=1e-2)


def test_project_covariance_degenerate():
    cov2d = project_covariance(np.zeros((3, 3)), np.array([0.3, -0.1, 2.0]), identity_camera())
    np.testing.assert_allclose(cov2d, 0.3 * np.eye(2), atol=1e-12)


def test_projection_jacobian_matches_finite_differences():
    cam = identity_camera()
    p = np.array([0.3, -0.2, 2.5])
    h = 1e-5
    jac = np.zeros((2, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        jac[:, k] = (project_point(p + d, cam)[0] - project_point(p - d, cam)[0]) / (2 * h)
    # J W from the projected covariance of a unit-variance axis
    for k in range(3):
        cov = np.zeros((3, 3))
        cov[k, k] = 1.0
        cov2d = project_covariance(cov, p, cam, floor=0.0)
        np.testing.assert_allclose(cov2d, np.outer(jac[:, k], jac[:, k]), rtol=1e-4, atol=1e-6)


def test_select_and_concat_keep_order():
    a = random_field(5, seed=1)
    b = random_field(3, seed=2)
    b.provenance[:] = "node:car"
    joined = GaussianField.concat([a, b])
    assert len(joined) == 8
    np.testing.assert_array_equal(joined.positions[5:], b.positions)
    assert joined.provenance[5] == "node:car"
    np.testing.assert_array_equal(joined.background, a.background)
    sub = joined.select([6, 0])
    np.testing.assert_array_equal(sub.positions, joined.positions[[6, 0]])
    mask = np.zeros(8, dtype=bool)
    mask[[1, 7]] = True
    np.testing.assert_array_equal(joined.select(mask).positions, joined.positions[[1, 7]])


def test_validate_rejects_nan():
    field = random_field(3)
    field.validate()
    field.positions[1, 0] = np.nan
    with pytest.raises(DataError):
        field.validate()


def test_opacity_multiplier():
    field = random_field(4)
    halved = field.with_opacity_multiplier(0.5)
    np.testing.assert_allclose(halved.opacities, 0.5 * field.opacities, rtol=1e-9)
    np.testing.assert_array_equal(field.with_opacity_multiplier(1.0).opacity_logits, field.opacity_logits)
