"""
Photometric and geometric losses. All functions accept numpy arrays (and
return floats) or torch tensors (and return differentiable scalars).
"""
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from scipy.spatial import cKDTree

from cgs.api.core import BadKappa, DimensionMismatch, EmptyInput


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ROBUST_EPS = 1e-3

LIDAR_SAMPLES = 4096


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.losses")
    return _logger


def _as_tensor(x) -> Tuple[torch.Tensor, bool]:
    if torch.is_tensor(x):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _result(value: torch.Tensor, is_tensor: bool):
    if is_tensor:
        return value
    return float(value.detach())


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionMismatch("Image shapes differ: %s vs %s" % (str(tuple(a.shape)), str(tuple(b.shape))))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """
    Returns the normalized 2D Gaussian window (size x size).
    """
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # (H, W, C) -> (1, C, H, W), zero padding as in the reference splatting code
    if a.dim() == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    channels = a.shape[-1]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    w = gaussian_window().to(x.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()
    pad = SSIM_WINDOW // 2
    mu_x = F.conv2d(x, w, padding=pad, groups=channels)
    mu_y = F.conv2d(y, w, padding=pad, groups=channels)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = F.conv2d(x * x, w, padding=pad, groups=channels) - mu_xx
    s_yy = F.conv2d(y * y, w, padding=pad, groups=channels) - mu_yy
    s_xy = F.conv2d(x * y, w, padding=pad, groups=channels) - mu_xy
    num = (2.0 * mu_xy + SSIM_C1) * (2.0 * s_xy + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return num / den


def ssim(a, b):
    """
    Mean structural similarity with an 11x11 Gaussian window (sigma 1.5) on
    [0,1] data.

    :param a: the first image (H, W, C) or (H, W)
    :param b: the second image, same shape
    :return: the SSIM value
    """
    ta, is_tensor = _as_tensor(a)
    tb, _ = _as_tensor(b)
    _check_shapes(ta, tb)
    return _result(_ssim_map(ta, tb).mean(), is_tensor)


def _grid(tiles: Union[int, Sequence[int]]) -> Tuple[int, int]:
    if isinstance(tiles, int):
        return tiles, tiles
    rows, cols = tiles
    return int(rows), int(cols)


def tssim_loss(rendered, target, tiles: Union[int, Sequence[int]] = (4, 4)):
    """
    Tile-wise SSIM loss: 1 minus the mean SSIM over a grid of screen tiles.
    Edge tiles absorb the remainder when the image does not divide evenly.

    :param rendered: the rendered image (H, W, 3)
    :param target: the target image (H, W, 3)
    :param tiles: the grid, either n (n x n) or (rows, cols)
    :return: the loss
    """
    ta, is_tensor = _as_tensor(rendered)
    tb, _ = _as_tensor(target)
    _check_shapes(ta, tb)
    rows, cols = _grid(tiles)
    h, w = ta.shape[0], ta.shape[1]
    row_edges = [len(r) for r in np.array_split(np.arange(h), rows)]
    col_edges = [len(c) for c in np.array_split(np.arange(w), cols)]
    values = []
    y0 = 0
    for th in row_edges:
        x0 = 0
        for tw in col_edges:
            if (th > 0) and (tw > 0):
                values.append(_ssim_map(ta[y0:y0 + th, x0:x0 + tw], tb[y0:y0 + th, x0:x0 + tw]).mean())
            x0 += tw
        y0 += th
    loss = 1.0 - torch.stack(values).mean()
    return _result(loss, is_tensor)


def robust_loss(rendered, target, kappa: float = 0.9, eps: float = ROBUST_EPS):
    """
    Power-law robust photometric loss, mean over pixels of
    (|delta rgb|^2 + eps^2)^(kappa/2) - eps^kappa.

    :param rendered: the rendered image (H, W, 3)
    :param target: the target image (H, W, 3)
    :param kappa: the shape parameter in (0, 1]
    :type kappa: float
    :param eps: the smoothing constant
    :type eps: float
    :return: the loss
    """
    if not (0.0 < kappa <= 1.0):
        raise BadKappa("kappa must lie in (0,1]: %g" % kappa)
    ta, is_tensor = _as_tensor(rendered)
    tb, _ = _as_tensor(target)
    _check_shapes(ta, tb)
    sq = ((ta - tb) ** 2).sum(dim=-1)
    loss = ((sq + eps * eps) ** (0.5 * kappa) - eps ** kappa).mean()
    return _result(loss, is_tensor)


def lidar_correspondences(centers: np.ndarray, prior_points: np.ndarray, samples: Optional[int] = LIDAR_SAMPLES,
                          rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Samples prior points and finds the nearest Gaussian center of each.

    :param centers: the Gaussian centers (N, 3)
    :param prior_points: the prior points (M, 3)
    :param samples: the number of prior points to sample, None for all
    :param rng: the random generator used for sampling
    :return: tuple of sampled prior indices and nearest center indices
    :rtype: tuple
    """
    if (len(centers) == 0) or (len(prior_points) == 0):
        raise EmptyInput("LiDAR loss requires Gaussians and prior points")
    if (samples is None) or (samples >= len(prior_points)):
        sel = np.arange(len(prior_points))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        sel = np.sort(rng.choice(len(prior_points), size=samples, replace=False))
    _, nearest = cKDTree(centers).query(prior_points[sel], k=1)
    return sel, np.asarray(nearest, dtype=np.int64)


def lidar_loss(positions, prior, samples: Optional[int] = LIDAR_SAMPLES, rng: Optional[np.random.Generator] = None):
    """
    Mean squared distance from sampled prior points to their nearest
    Gaussian center.

    :param positions: the Gaussian centers (N, 3), a GaussianField or a tensor
    :param prior: the prior, a PointCloud or an (M, 3) array
    :param samples: the number of prior points to sample, None for all
    :param rng: the random generator for the sample
    :return: the loss
    """
    if hasattr(positions, "positions"):
        positions = positions.positions
    prior_points = np.asarray(getattr(prior, "positions", prior), dtype=np.float64).reshape(-1, 3)
    tp, is_tensor = _as_tensor(positions)
    sel, nearest = lidar_correspondences(tp.detach().numpy(), prior_points, samples=samples, rng=rng)
    diff = tp[torch.as_tensor(nearest)] - torch.as_tensor(prior_points[sel])
    loss = (diff * diff).sum(dim=-1).mean()
    return _result(loss, is_tensor)
