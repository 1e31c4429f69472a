"""
Texture editing: depth equalization, unprojection and backprojection of an
edited image region into flat Gaussians.
"""
import logging

import numpy as np

from scipy.ndimage import sobel

from cgs.api.core import DimensionMismatch, EmptyMask, InvalidDepth
from cgs.api.gaussians import Camera, GaussianField, build_covariance, logit, matrix_to_quaternion
from cgs.api.sh import NUM_SH_COEFFS, rgb_to_sh


PROVENANCE_TEXTURE = "texture"

THICKNESS_RATIO = 0.02

PATCH_OPACITY = 0.99


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.texture")
    return _logger


def equalize_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Replaces the masked depths of every row by the mean of that row's masked
    depths. Unmasked pixels are copied unchanged.

    :param depth: the H x W depth map
    :type depth: np.ndarray
    :param mask: the H x W edit mask
    :type mask: np.ndarray
    :return: the equalized depth map
    :rtype: np.ndarray
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape:
        raise DimensionMismatch("Depth %s and mask %s differ in shape" % (str(depth.shape), str(mask.shape)))
    if not np.any(mask):
        raise EmptyMask("The edit mask is empty")
    result = depth.copy()
    for row in np.flatnonzero(mask.any(axis=1)):
        sel = mask[row]
        result[row, sel] = depth[row, sel].mean()
    return result


def point_map(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """
    Unprojects every pixel center with its depth into world coordinates.

    :param depth: the H x W camera-space depths
    :param cam: the camera
    :return: the H x W x 3 world points
    :rtype: np.ndarray
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    pc = np.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], axis=-1)
    return cam.cam_to_world_points(pc.reshape(-1, 3)).reshape(h, w, 3)


def surface_normals(points: np.ndarray, cam: Camera) -> np.ndarray:
    """
    World-space unit normals of a point map from Sobel derivatives along the
    image axes, oriented towards the camera.

    :param points: the H x W x 3 world points
    :param cam: the camera the points were seen from
    :return: the H x W x 3 normals
    :rtype: np.ndarray
    """
    du = np.stack([sobel(points[..., i], axis=1, mode="nearest") for i in range(3)], axis=-1)
    dv = np.stack([sobel(points[..., i], axis=0, mode="nearest") for i in range(3)], axis=-1)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.maximum(norm, 1e-300), 0.0)
    flip = np.sum(n * (cam.center - points), axis=-1) < 0
    n[flip] *= -1.0
    return n


def normals_from_depth(depth: np.ndarray) -> np.ndarray:
    """
    Image-space normals (s_x, s_y, 1) / |.| from 3x3 Sobel gradients of a
    depth map.

    :param depth: the H x W depth map
    :return: the H x W x 3 unit normals
    :rtype: np.ndarray
    """
    depth = np.asarray(depth, dtype=np.float64)
    sx = sobel(depth, axis=1, mode="nearest")
    sy = sobel(depth, axis=0, mode="nearest")
    n = np.stack([sx, sy, np.ones_like(depth)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _tangent_frames(normals: np.ndarray) -> np.ndarray:
    """
    Rotation matrices whose third column is the given normal.
    """
    helper = np.where(np.abs(normals[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2, normals], axis=-1)


def backproject_texture(edited: np.ndarray, mask: np.ndarray, depth: np.ndarray, cam: Camera, stride: int = 1,
                        thickness_ratio: float = THICKNESS_RATIO, opacity: float = PATCH_OPACITY) -> GaussianField:
    """
    Turns every stride-th masked pixel into a flat Gaussian lying on the
    local surface, colored from the edited image. World covariances are
    stored with the Gaussians.

    :param edited: the edited H x W x 3 image in [0,1]
    :param mask: the H x W edit mask
    :param depth: the (equalized) H x W depth map
    :param cam: the camera of the view
    :param stride: the pixel step
    :type stride: int
    :param thickness_ratio: thickness relative to the tangent scale
    :param opacity: the activated opacity of the patch
    :return: the patch Gaussians (provenance "texture")
    :rtype: GaussianField
    """
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != mask.shape:
        raise DimensionMismatch("Depth %s and mask %s differ in shape" % (str(depth.shape), str(mask.shape)))
    if not np.any(mask):
        raise EmptyMask("The edit mask is empty")
    if np.any(~(depth[mask] > 0)):
        raise InvalidDepth("Non-positive depth inside the edit mask")
    grid = np.zeros_like(mask)
    grid[::stride, ::stride] = True
    sel = mask & grid
    rows, cols = np.nonzero(sel)

    # holes outside the mask would bend the border normals
    safe = np.where(depth > 0, depth, depth[mask].mean())
    points = point_map(safe, cam)
    normals = surface_normals(points, cam)[rows, cols]
    bad = ~np.all(np.isfinite(normals), axis=1) | (np.linalg.norm(normals, axis=1) < 0.5)
    if np.any(bad):
        view = cam.center - points[rows[bad], cols[bad]]
        normals[bad] = view / np.linalg.norm(view, axis=1, keepdims=True)

    z = depth[rows, cols]
    tangent = stride * z / (0.5 * (cam.fx + cam.fy))
    n = len(rows)
    log_scales = np.log(np.stack([tangent, tangent, thickness_ratio * tangent], axis=1))
    rotations = matrix_to_quaternion(_tangent_frames(normals))
    sh = np.zeros((n, NUM_SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh(np.asarray(edited, dtype=np.float64)[rows, cols, :3])
    result = GaussianField(points[rows, cols], log_scales, rotations, sh, np.full(n, logit(opacity)),
                           provenance=PROVENANCE_TEXTURE)
    result.covariances = build_covariance(result.log_scales, result.rotations)
    logger().info("Backprojected %d texture Gaussians from view %s@%d" % (n, cam.camera_id, cam.timestep))
    return result
