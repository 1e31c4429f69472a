"""
Real spherical harmonics up to degree 3, using the constant table and sign
conventions of the community 3DGS code so that asset files interoperate.
"""
import logging

import numpy as np
import torch

from numpy.polynomial.legendre import leggauss


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
]
SH_C3 = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
]

MAX_SH_DEGREE = 3

NUM_SH_COEFFS = (MAX_SH_DEGREE + 1) ** 2

# first coefficient index of every band
BAND_START = [0, 1, 4, 9]


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.sh")
    return _logger


def sh_basis(dirs, degree: int = MAX_SH_DEGREE):
    """
    Evaluates the real SH basis functions for the given unit directions.
    Works with numpy arrays and torch tensors alike.

    :param dirs: the unit directions, shape (N, 3)
    :param degree: the maximum degree to evaluate (0..3)
    :type degree: int
    :return: the basis values, shape (N, (degree+1)^2)
    """
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    result = [SH_C0 * (x * 0.0 + 1.0)]
    if degree > 0:
        result += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        result += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        result += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    if torch.is_tensor(dirs):
        return torch.stack(result, dim=-1)
    return np.stack(result, axis=-1)


def eval_sh(sh_coeffs, view_dir, degree: int):
    """
    Evaluates the view-dependent color. Returns the raw value, the +0.5 offset
    and clamping are applied by the renderer.

    :param sh_coeffs: the coefficients, shape (..., 16, 3)
    :param view_dir: the unit view directions, shape (..., 3)
    :param degree: the active degree (0..3), higher coefficients are ignored
    :type degree: int
    :return: the raw rgb values, shape (..., 3)
    """
    n = (degree + 1) ** 2
    basis = sh_basis(view_dir, degree)
    if torch.is_tensor(sh_coeffs):
        return torch.einsum("...k,...kc->...c", basis, sh_coeffs[..., :n, :])
    return np.einsum("...k,...kc->...c", basis, np.asarray(sh_coeffs)[..., :n, :])


def rgb_to_sh(rgb):
    """
    Converts rgb values in [0,1] into DC coefficients.

    :param rgb: the colors
    :return: the DC coefficients
    """
    return (rgb - 0.5) / SH_C0


def sh_to_rgb(dc):
    """
    Converts DC coefficients back into rgb (without clamping).

    :param dc: the DC coefficients
    :return: the colors
    """
    return dc * SH_C0 + 0.5


def _sphere_quadrature(degree: int):
    """
    Gauss-Legendre nodes in cos(theta) times equally spaced azimuths. The
    rule integrates polynomials on the sphere up to the given degree exactly.

    :return: the unit directions (N, 3) and their weights (N,), summing to 4 pi
    """
    nodes, weights = leggauss(degree // 2 + 1)
    n_phi = degree + 1
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    cos_t, ph = np.meshgrid(nodes, phi, indexing="ij")
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    dirs = np.stack([sin_t * np.cos(ph), sin_t * np.sin(ph), cos_t], axis=-1).reshape(-1, 3)
    w = np.repeat(weights, n_phi) * (2.0 * np.pi / n_phi)
    return dirs, w


# products of two basis functions have degree 2 * MAX_SH_DEGREE
_QUAD_DIRS, _QUAD_WEIGHTS = _sphere_quadrature(2 * MAX_SH_DEGREE)


def sh_rotation_matrix(rotation: np.ndarray) -> np.ndarray:
    """
    Computes the block-diagonal matrix D that rotates the coefficients of a
    function f so that the rotated function satisfies f'(d) = f(R^T d).
    D[k, j] is the inner product of basis function k with the rotated basis
    function j; the basis is orthonormal and the quadrature is exact for
    these integrands, so every block is the exact rotation of its band.

    :param rotation: the 3x3 rotation matrix
    :type rotation: np.ndarray
    :return: the 16x16 matrix
    :rtype: np.ndarray
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    result = np.zeros((NUM_SH_COEFFS, NUM_SH_COEFFS))
    result[0, 0] = 1.0
    basis = sh_basis(_QUAD_DIRS) * _QUAD_WEIGHTS[:, None]
    basis_rot = sh_basis(_QUAD_DIRS @ rotation)
    for l in range(1, MAX_SH_DEGREE + 1):
        s = slice(BAND_START[l], BAND_START[l] + 2 * l + 1)
        result[s, s] = basis[:, s].T @ basis_rot[:, s]
    return result


def rotate_sh(sh_coeffs: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """
    Rotates SH coefficients of shape (N, 16, 3) by the rotation matrix.
    The DC band is unchanged.

    :param sh_coeffs: the coefficients
    :type sh_coeffs: np.ndarray
    :param rotation: the 3x3 rotation matrix
    :type rotation: np.ndarray
    :return: the rotated coefficients
    :rtype: np.ndarray
    """
    d = sh_rotation_matrix(rotation)
    return np.einsum("ij,njc->nic", d, sh_coeffs)
