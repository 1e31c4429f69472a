"""
Gaussian primitives, pinhole cameras and the closed-form geometry shared by
all other modules (covariance construction, point and covariance projection).
"""
import logging

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from scipy.spatial.transform import Rotation

from cgs.api.core import BehindCamera, DataError
from cgs.api.sh import NUM_SH_COEFFS, MAX_SH_DEGREE, rgb_to_sh


Z_NEAR = 0.01
""" points nearer than this (camera-space z, meters) are culled """

COV2D_FLOOR = 0.3
""" low-pass floor added to the diagonal of projected covariances (px^2) """

PROVENANCE_STATIC = "static"


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.gaussians")
    return _logger


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """
    Normalizes (w, x, y, z) quaternions along the last axis.

    :param q: the quaternion(s)
    :type q: np.ndarray
    :return: the unit quaternion(s)
    :rtype: np.ndarray
    """
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """
    Converts (w, x, y, z) quaternions into rotation matrices, renormalizing first.

    :param q: the quaternion(s), shape (..., 4)
    :type q: np.ndarray
    :return: the rotation matrices, shape (..., 3, 3)
    :rtype: np.ndarray
    """
    q = normalize_quaternion(q)
    flat = q.reshape(-1, 4)
    if len(flat) == 0:
        return np.zeros(q.shape[:-1] + (3, 3))
    # scipy expects scalar-last
    result = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return result.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """
    Converts rotation matrices into (w, x, y, z) quaternions with w >= 0.

    :param m: the matrices, shape (..., 3, 3)
    :type m: np.ndarray
    :return: the quaternions, shape (..., 4)
    :rtype: np.ndarray
    """
    m = np.asarray(m, dtype=np.float64)
    xyzw = Rotation.from_matrix(m.reshape(-1, 3, 3)).as_quat()
    result = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    result[result[:, 0] < 0] *= -1.0
    return result.reshape(m.shape[:-2] + (4,))


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Hamilton product a * b of (w, x, y, z) quaternions, broadcasting.

    :param a: the left quaternion(s)
    :param b: the right quaternion(s)
    :return: the product
    :rtype: np.ndarray
    """
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def build_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """
    Builds the covariance R S S^T R^T from log standard deviations and a
    (w, x, y, z) quaternion. Works on single primitives or batches.

    :param log_scale: the per-axis log standard deviations, shape (..., 3)
    :type log_scale: np.ndarray
    :param rotation: the quaternion(s), shape (..., 4), renormalized internally
    :type rotation: np.ndarray
    :return: the symmetric positive-definite matrices, shape (..., 3, 3)
    :rtype: np.ndarray
    """
    r = quaternion_to_matrix(rotation)
    s = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    result = np.einsum("...ij,...j,...kj->...ik", r, s, r)
    return 0.5 * (result + np.swapaxes(result, -1, -2))


@dataclass
class Gaussian:
    """
    A single 3D primitive.
    """
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.log_scale, self.rotation)


@dataclass
class Camera:
    """
    Pinhole camera: intrinsics K and the world-to-camera transform E
    (OpenCV convention, x right, y down, z forward).
    """
    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    timestep: int = 0
    camera_id: str = "cam0"

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)

    @classmethod
    def from_params(cls, fx: float, fy: float, cx: float, cy: float, world_to_camera: np.ndarray,
                    width: int, height: int, timestep: int = 0, camera_id: str = "cam0") -> "Camera":
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(k, world_to_camera, width, height, timestep=timestep, camera_id=camera_id)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """ camera center rho in world coordinates """
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """ optical axis in world coordinates """
        return self.rotation[2].copy()

    def validate(self):
        """
        Checks the camera invariants, raises a DataError if violated.
        """
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise DataError("Camera %s: rotation block is not orthonormal" % self.camera_id)
        if (self.fx <= 0) or (self.fy <= 0):
            raise DataError("Camera %s: focal lengths must be positive" % self.camera_id)
        if not ((0 <= self.cx < self.width) and (0 <= self.cy < self.height)):
            raise DataError("Camera %s: principal point outside image" % self.camera_id)

    def world_to_cam_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def cam_to_world_points(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 1.0, 0.0)) -> np.ndarray:
    """
    Builds a world-to-camera transform for a camera at eye looking at target.

    :param eye: the camera center
    :param target: the point to look at
    :param up: the world up direction
    :return: the 4x4 world-to-camera matrix
    :rtype: np.ndarray
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    result = np.eye(4)
    result[:3, :3] = r
    result[:3, 3] = -r @ eye
    return result


def project_point(p: np.ndarray, cam: Camera, z_near: float = Z_NEAR) -> Tuple[np.ndarray, float]:
    """
    Projects a world point into the image.

    :param p: the world point
    :type p: np.ndarray
    :param cam: the camera
    :type cam: Camera
    :param z_near: the near plane
    :type z_near: float
    :return: tuple of pixel (u, v) and camera-space depth
    :rtype: tuple
    """
    pc = cam.world_to_cam_points(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    if pc[2] <= z_near:
        raise BehindCamera("Point %s is behind the camera (z=%g)" % (str(p), pc[2]))
    uv = cam.intrinsics @ pc
    return uv[:2] / uv[2], float(pc[2])


def project_points(points: np.ndarray, cam: Camera, z_near: float = Z_NEAR) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized projection that flags instead of raising.

    :param points: the world points, shape (N, 3)
    :param cam: the camera
    :param z_near: the near plane
    :return: tuple of pixels (N, 2), depths (N,), in-front mask (N,)
    :rtype: tuple
    """
    pc = cam.world_to_cam_points(points)
    z = pc[:, 2]
    valid = z > z_near
    zs = np.where(valid, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    return np.stack([u, v], axis=-1), z, valid


def projection_jacobian(p_cam: np.ndarray, cam: Camera) -> np.ndarray:
    """
    Affine approximation of the perspective projection at a camera-space point.

    :param p_cam: the camera-space point
    :param cam: the camera
    :return: the 2x3 Jacobian
    :rtype: np.ndarray
    """
    x, y, z = p_cam
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_covariance(cov: np.ndarray, p: np.ndarray, cam: Camera, z_near: float = Z_NEAR,
                       floor: float = COV2D_FLOOR) -> np.ndarray:
    """
    Projects a world covariance into a 2D screen-space covariance,
    J W Sigma W^T J^T plus the low-pass floor.

    :param cov: the 3x3 world covariance
    :param p: the world position of the Gaussian
    :param cam: the camera
    :param z_near: the near plane
    :param floor: the value added to the diagonal
    :return: the 2x2 covariance
    :rtype: np.ndarray
    """
    pc = cam.world_to_cam_points(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    if pc[2] <= z_near:
        raise BehindCamera("Gaussian at %s is behind the camera" % str(p))
    t = projection_jacobian(pc, cam) @ cam.rotation
    result = t @ np.asarray(cov, dtype=np.float64) @ t.T
    result = 0.5 * (result + result.T)
    return result + floor * np.eye(2)


def _str_array(values, n: int) -> np.ndarray:
    result = np.empty(n, dtype=object)
    if isinstance(values, str):
        result[:] = values
    else:
        result[:] = list(values)
    return result


@dataclass
class GaussianField:
    """
    A flat, ordered collection of Gaussians. Row i of every array belongs to
    Gaussian i; operations never reorder rows silently.
    """
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    sh_degree_active: int = MAX_SH_DEGREE
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    provenance: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    position_frozen: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(n, NUM_SH_COEFFS, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.provenance is None:
            self.provenance = _str_array(PROVENANCE_STATIC, n)
        elif not isinstance(self.provenance, np.ndarray) or self.provenance.dtype != object:
            self.provenance = _str_array(self.provenance, n)
        if self.covariances is not None:
            self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(n, 3, 3)
        if self.position_frozen is not None:
            self.position_frozen = np.asarray(self.position_frozen, dtype=bool).reshape(n)

    @classmethod
    def empty(cls, background=None) -> "GaussianField":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, NUM_SH_COEFFS, 3)),
                   np.zeros(0), background=np.zeros(3) if background is None else background)

    @classmethod
    def from_points(cls, positions: np.ndarray, colors: np.ndarray, scale: float = 0.1,
                    opacity: float = 0.1, provenance: str = PROVENANCE_STATIC) -> "GaussianField":
        """
        Creates isotropic Gaussians with DC color only.

        :param positions: the centers, shape (N, 3)
        :param colors: the rgb colors in [0,1], shape (N, 3)
        :param scale: the standard deviation (meters), scalar or (N,)
        :param opacity: the activated opacity
        :param provenance: the provenance tag for all Gaussians
        :return: the field
        :rtype: GaussianField
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        sh = np.zeros((n, NUM_SH_COEFFS, 3))
        sh[:, 0, :] = rgb_to_sh(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        log_scales = np.repeat(np.log(np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,)))[:, None], 3, axis=1)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(positions, log_scales, rotations, sh, np.full(n, logit(opacity)),
                   provenance=_str_array(provenance, n))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian(self, index: int) -> Gaussian:
        return Gaussian(self.positions[index].copy(), self.log_scales[index].copy(), self.rotations[index].copy(),
                        self.sh_coeffs[index].copy(), float(self.opacity_logits[index]))

    def world_covariances(self) -> np.ndarray:
        """
        Returns the stored world covariances where present, otherwise the ones
        derived from scales and rotations.

        :return: the covariances, shape (N, 3, 3)
        :rtype: np.ndarray
        """
        if self.covariances is not None:
            return self.covariances
        return build_covariance(self.log_scales, self.rotations)

    def copy(self) -> "GaussianField":
        return replace(
            self,
            positions=self.positions.copy(), log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(), sh_coeffs=self.sh_coeffs.copy(),
            opacity_logits=self.opacity_logits.copy(), background=self.background.copy(),
            provenance=self.provenance.copy(),
            covariances=None if self.covariances is None else self.covariances.copy(),
            position_frozen=None if self.position_frozen is None else self.position_frozen.copy())

    def select(self, indices) -> "GaussianField":
        """
        Returns the Gaussians at the given indices (or boolean mask), in that
        order. The index array is the mapping new -> old.

        :param indices: integer indices or boolean mask
        :return: the new field
        :rtype: GaussianField
        """
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return replace(
            self,
            positions=self.positions[idx], log_scales=self.log_scales[idx], rotations=self.rotations[idx],
            sh_coeffs=self.sh_coeffs[idx], opacity_logits=self.opacity_logits[idx],
            background=self.background.copy(), provenance=self.provenance[idx],
            covariances=None if self.covariances is None else self.covariances[idx],
            position_frozen=None if self.position_frozen is None else self.position_frozen[idx])

    @classmethod
    def concat(cls, fields: Sequence["GaussianField"]) -> "GaussianField":
        """
        Concatenates fields in order: Gaussian j of fields[i] lands at
        offset(i) + j. Background and SH degree come from the first field.

        :param fields: the fields to join
        :return: the joined field
        :rtype: GaussianField
        """
        fields = list(fields)
        if len(fields) == 0:
            return cls.empty()
        first = fields[0]
        covs = None
        if any(f.covariances is not None for f in fields):
            covs = np.concatenate([f.world_covariances() for f in fields], axis=0)
        frozen = None
        if any(f.position_frozen is not None for f in fields):
            frozen = np.concatenate([
                f.position_frozen if f.position_frozen is not None else np.zeros(len(f), dtype=bool)
                for f in fields])
        return cls(
            np.concatenate([f.positions for f in fields]),
            np.concatenate([f.log_scales for f in fields]),
            np.concatenate([f.rotations for f in fields]),
            np.concatenate([f.sh_coeffs for f in fields]),
            np.concatenate([f.opacity_logits for f in fields]),
            sh_degree_active=first.sh_degree_active,
            background=first.background.copy(),
            provenance=np.concatenate([f.provenance for f in fields]),
            covariances=covs,
            position_frozen=frozen)

    def with_opacity_multiplier(self, multiplier: float) -> "GaussianField":
        """
        Returns a copy whose activated opacities are scaled by the multiplier.

        :param multiplier: the factor in (0, 1]
        :type multiplier: float
        :return: the new field
        :rtype: GaussianField
        """
        result = self.copy()
        if multiplier != 1.0:
            result.opacity_logits = logit(np.clip(self.opacities * multiplier, 1e-12, 1.0 - 1e-12))
        return result

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns the axis-aligned bounds (min, max) of the centers.
        """
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def validate(self):
        """
        Checks the Gaussian invariants, raises a DataError if violated.
        """
        if not np.all(np.isfinite(self.positions)):
            raise DataError("Non-finite Gaussian positions")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise DataError("Degenerate Gaussian rotations")
        if not np.all(np.isfinite(self.log_scales)):
            raise DataError("Non-finite Gaussian scales")
        op = self.opacities
        if np.any(op <= 0) or np.any(op >= 1):
            raise DataError("Gaussian opacities outside (0,1)")
        if not (0 <= self.sh_degree_active <= MAX_SH_DEGREE):
            raise DataError("Invalid SH degree: %d" % self.sh_degree_active)

    def normalize_rotations(self):
        """
        Renormalizes the quaternions in place.
        """
        self.rotations = normalize_quaternion(self.rotations)
