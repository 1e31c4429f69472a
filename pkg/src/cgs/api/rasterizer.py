"""
CPU tile rasterizer for Gaussian fields.

The forward pass projects every Gaussian, sorts them globally front-to-back
(ties broken by insertion index) and alpha-composites them per tile. Only
Gaussians whose screen-space footprint can reach the alpha cull threshold
inside a tile are evaluated there, so the tiled result equals the per-pixel
oracle. Gradients come from torch autograd over the same computation.
"""
import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from cgs.api.core import DimensionMismatch, ParseError, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField, Z_NEAR, COV2D_FLOOR, sigmoid, project_covariance
from cgs.api.sh import eval_sh


FIELD_PARAMS = ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits")


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.rasterizer")
    return _logger


@dataclass
class RasterConfig:
    """
    Rasterization parameters.
    """
    tile_size: int = 16
    alpha_cull_threshold: float = 1.0 / 255.0
    gaussian_extent_sigmas: float = 3.0
    background: Optional[Sequence[float]] = None
    transmittance_threshold: float = 1e-4
    z_near: float = Z_NEAR
    cov2d_floor: float = COV2D_FLOOR
    workers: int = 1

    def validate(self):
        if self.tile_size < 1:
            raise ParseError("tile_size must be at least 1: %d" % self.tile_size)
        for name in ["alpha_cull_threshold", "transmittance_threshold"]:
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise ParseError("%s must lie in (0,1): %g" % (name, value))
        if self.gaussian_extent_sigmas <= 0:
            raise ParseError("gaussian_extent_sigmas must be positive")
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "RasterConfig":
        return dataclass_from_dict(cls, d, section="raster")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RenderOutput:
    """
    The rendered images and per-Gaussian statistics. grad_norms holds the
    magnitude of the screen-space position gradient; it stays zero until a
    backward pass fills it (see backward).
    """
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    grad_norms: np.ndarray
    touched: np.ndarray


def field_tensors(field: GaussianField, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
    """
    Turns the trainable arrays of the field into float64 tensors.

    :param field: the field to convert
    :type field: GaussianField
    :param requires_grad: whether the tensors are leaves that require gradients
    :type requires_grad: bool
    :return: the tensors, keyed by parameter name
    :rtype: dict
    """
    result = dict()
    for name in FIELD_PARAMS:
        t = torch.tensor(getattr(field, name), dtype=torch.float64)
        if requires_grad:
            t.requires_grad_(True)
        result[name] = t
    return result


def quaternion_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def build_covariance_torch(log_scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    r = quaternion_to_matrix_torch(rotations)
    m = r * torch.exp(log_scales).unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def _background(field_background, cfg: RasterConfig) -> np.ndarray:
    if cfg.background is not None:
        return np.asarray(cfg.background, dtype=np.float64).reshape(3)
    return np.asarray(field_background, dtype=np.float64).reshape(3)


def _project(params: Dict[str, torch.Tensor], cam: Camera, cfg: RasterConfig, sh_degree: int,
             covariances: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    pos = params["positions"]
    rot = torch.as_tensor(cam.rotation, dtype=torch.float64)
    trans = torch.as_tensor(cam.translation, dtype=torch.float64)
    pc = pos @ rot.T + trans
    z = pc[:, 2]
    valid = (z > cfg.z_near).detach()
    zs = torch.where(valid, z, torch.ones_like(z))
    x, y = pc[:, 0], pc[:, 1]
    means2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)

    if covariances is None:
        cov3d = build_covariance_torch(params["log_scales"], params["rotations"])
    else:
        cov3d = covariances
    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / (zs * zs)], dim=-1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / (zs * zs)], dim=-1),
    ], dim=-2)
    t = jac @ rot
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    a = cov2d[:, 0, 0] + cfg.cov2d_floor
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1] + cfg.cov2d_floor
    det = a * c - b * b

    center = torch.as_tensor(cam.center, dtype=torch.float64)
    dirs = pos - center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    rgb = torch.clamp(eval_sh(params["sh_coeffs"], dirs, sh_degree) + 0.5, 0.0, 1.0)
    opacity = torch.sigmoid(params["opacity_logits"])

    # conservative footprint radius, in pixels
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        ratio = torch.clamp(opacity / cfg.alpha_cull_threshold, min=1.0)
        k = torch.clamp(torch.sqrt(2.0 * torch.log(ratio)), min=cfg.gaussian_extent_sigmas)
        radius = k * torch.sqrt(lam)
        visible = valid & (opacity >= cfg.alpha_cull_threshold)

    return {
        "means2d": means2d,
        "conic_a": c / det,
        "conic_b": -b / det,
        "conic_c": a / det,
        "rgb": rgb,
        "opacity": opacity,
        "depth": z,
        "radius": radius,
        "visible": visible,
    }


def _sorted_visible(proj: Dict[str, torch.Tensor]) -> torch.Tensor:
    idx = torch.nonzero(proj["visible"], as_tuple=False).flatten()
    if len(idx) == 0:
        return idx
    order = torch.sort(proj["depth"].detach()[idx], stable=True).indices
    return idx[order]


def _composite(proj: Dict[str, torch.Tensor], idx: torch.Tensor, px: torch.Tensor, py: torch.Tensor,
               bg: torch.Tensor, cfg: RasterConfig):
    """
    Composites the (already depth-sorted) Gaussians idx over the pixel centers.
    Returns color (P,3), depth (P,), alpha (P,), per-Gaussian hit counts (K,).
    """
    n = px.shape[0]
    if len(idx) == 0:
        return bg.expand(n, 3).clone(), torch.zeros(n, dtype=torch.float64), \
            torch.zeros(n, dtype=torch.float64), torch.zeros(0, dtype=torch.int64)
    m = proj["means2d"][idx]
    dx = px[:, None] - m[None, :, 0]
    dy = py[:, None] - m[None, :, 1]
    q = proj["conic_a"][idx][None, :] * dx * dx \
        + 2.0 * proj["conic_b"][idx][None, :] * dx * dy \
        + proj["conic_c"][idx][None, :] * dy * dy
    alpha = proj["opacity"][idx][None, :] * torch.exp(-0.5 * q)
    alpha = torch.where(alpha >= cfg.alpha_cull_threshold, alpha, torch.zeros_like(alpha))
    trans = torch.cumprod(1.0 - alpha, dim=1)
    trans_before = torch.cat([torch.ones((n, 1), dtype=torch.float64), trans[:, :-1]], dim=1)
    active = (trans_before.detach() >= cfg.transmittance_threshold).to(torch.float64)
    weights = alpha * trans_before * active
    acc = weights.sum(dim=1)
    color = weights @ proj["rgb"][idx] + (1.0 - acc)[:, None] * bg[None, :]
    depth_sum = weights @ proj["depth"][idx]
    has = acc > 0
    depth = torch.where(has, depth_sum / torch.where(has, acc, torch.ones_like(acc)), torch.zeros_like(acc))
    hits = (weights.detach() > 0).sum(dim=0)
    return color, depth, acc, hits


def _tiles(width: int, height: int, tile_size: int):
    result = []
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            result.append((x0, y0, min(x0 + tile_size, width), min(y0 + tile_size, height)))
    return result


def render_torch(params: Dict[str, torch.Tensor], cam: Camera, cfg: RasterConfig, sh_degree: int,
                 background: np.ndarray, covariances: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """
    Differentiable tile renderer.

    :param params: the Gaussian tensors (see field_tensors)
    :type params: dict
    :param cam: the camera to render
    :type cam: Camera
    :param cfg: the rasterization options
    :type cfg: RasterConfig
    :param sh_degree: the active SH degree
    :type sh_degree: int
    :param background: the background rgb
    :param covariances: optional precomputed world covariances (N,3,3)
    :return: dictionary with color (H,W,3), depth (H,W), alpha (H,W), means2d (N,2), touched (N,)
    :rtype: dict
    """
    proj = _project(params, cam, cfg, sh_degree, covariances=covariances)
    order = _sorted_visible(proj)
    bg = torch.as_tensor(background, dtype=torch.float64)
    h, w = cam.height, cam.width
    n = params["positions"].shape[0]
    color = torch.zeros((h, w, 3), dtype=torch.float64)
    depth = torch.zeros((h, w), dtype=torch.float64)
    alpha = torch.zeros((h, w), dtype=torch.float64)
    touched = torch.zeros(n, dtype=torch.int64)

    with torch.no_grad():
        m = proj["means2d"].detach()[order]
        r = proj["radius"][order]
        lo_x, hi_x = m[:, 0] - r, m[:, 0] + r
        lo_y, hi_y = m[:, 1] - r, m[:, 1] + r

    def do_tile(tile):
        x0, y0, x1, y1 = tile
        # pixel centers sit at integer coordinates
        overlap = (hi_x >= x0) & (lo_x <= x1 - 1) & (hi_y >= y0) & (lo_y <= y1 - 1)
        idx = order[overlap]
        ys, xs = torch.meshgrid(torch.arange(y0, y1, dtype=torch.float64),
                                torch.arange(x0, x1, dtype=torch.float64), indexing="ij")
        c, d, a, hits = _composite(proj, idx, xs.reshape(-1), ys.reshape(-1), bg, cfg)
        return tile, idx, c, d, a, hits

    tiles = _tiles(w, h, cfg.tile_size)
    if (cfg.workers > 1) and not torch.is_grad_enabled():
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(do_tile, tiles))
    else:
        results = [do_tile(t) for t in tiles]

    for (x0, y0, x1, y1), idx, c, d, a, hits in results:
        th, tw = y1 - y0, x1 - x0
        color[y0:y1, x0:x1] = c.reshape(th, tw, 3)
        depth[y0:y1, x0:x1] = d.reshape(th, tw)
        alpha[y0:y1, x0:x1] = a.reshape(th, tw)
        if len(idx) > 0:
            touched.index_add_(0, idx, hits)

    return {
        "color": color,
        "depth": depth,
        "alpha": alpha,
        "means2d": proj["means2d"],
        "touched": touched,
    }


def render(field: GaussianField, cam: Camera, cfg: RasterConfig = None) -> RenderOutput:
    """
    Renders color, expected depth and alpha of the field from the camera.

    :param field: the field to render (may be empty)
    :type field: GaussianField
    :param cam: the camera
    :type cam: Camera
    :param cfg: the rasterization options, defaults if None
    :type cfg: RasterConfig
    :return: the rendered images
    :rtype: RenderOutput
    """
    if cfg is None:
        cfg = RasterConfig()
    with torch.no_grad():
        params = field_tensors(field)
        covs = None
        if field.covariances is not None:
            covs = torch.as_tensor(field.covariances, dtype=torch.float64)
        out = render_torch(params, cam, cfg, field.sh_degree_active, _background(field.background, cfg),
                           covariances=covs)
    return RenderOutput(
        color=out["color"].numpy(),
        depth=out["depth"].numpy(),
        alpha=out["alpha"].numpy(),
        grad_norms=np.zeros(len(field)),
        touched=out["touched"].numpy())


def render_oracle(field: GaussianField, cam: Camera, cfg: RasterConfig = None) -> RenderOutput:
    """
    Brute-force reference renderer: every pixel composites every Gaussian in
    global depth order, without tiles or extent culling. Slow, intended for
    a few hundred Gaussians at most.

    :param field: the field to render
    :type field: GaussianField
    :param cam: the camera
    :type cam: Camera
    :param cfg: the rasterization options
    :type cfg: RasterConfig
    :return: the rendered images
    :rtype: RenderOutput
    """
    if cfg is None:
        cfg = RasterConfig()
    bg = _background(field.background, cfg)
    h, w = cam.height, cam.width
    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    touched = np.zeros(len(field), dtype=np.int64)

    pc = cam.world_to_cam_points(field.positions)
    front = np.flatnonzero(pc[:, 2] > cfg.z_near)
    order = front[np.argsort(pc[front, 2], kind="stable")]
    covs = field.world_covariances()
    means, conics, rgbs = [], [], []
    for i in order:
        uv = cam.intrinsics @ pc[i]
        means.append(uv[:2] / uv[2])
        c2 = project_covariance(covs[i], field.positions[i], cam, z_near=cfg.z_near, floor=cfg.cov2d_floor)
        conics.append(np.linalg.inv(c2))
        d = field.positions[i] - cam.center
        d = d / np.linalg.norm(d)
        rgbs.append(np.clip(eval_sh(field.sh_coeffs[i], d, field.sh_degree_active) + 0.5, 0.0, 1.0))
    opac = sigmoid(field.opacity_logits)

    for py in range(h):
        for px in range(w):
            t = 1.0
            c = np.zeros(3)
            dsum = 0.0
            for k, i in enumerate(order):
                if t < cfg.transmittance_threshold:
                    break
                dxy = np.array([px, py], dtype=np.float64) - means[k]
                a = opac[i] * np.exp(-0.5 * dxy @ conics[k] @ dxy)
                if a < cfg.alpha_cull_threshold:
                    continue
                wgt = a * t
                c += wgt * rgbs[k]
                dsum += wgt * pc[i, 2]
                t *= 1.0 - a
                touched[i] += 1
            acc = 1.0 - t
            color[py, px] = c + (1.0 - acc) * bg
            alpha[py, px] = acc
            depth[py, px] = dsum / acc if acc > 0 else 0.0

    return RenderOutput(color=color, depth=depth, alpha=alpha, grad_norms=np.zeros(len(field)), touched=touched)


def backward(field: GaussianField, cam: Camera, cfg: RasterConfig, upstream: np.ndarray,
             upstream_depth: Optional[np.ndarray] = None, upstream_alpha: Optional[np.ndarray] = None,
             stats: Optional[RenderOutput] = None) -> Dict[str, np.ndarray]:
    """
    Computes the gradients of sum(upstream * color) (plus optional depth and
    alpha terms) with respect to all Gaussian parameters. The forward pass is
    recomputed internally. Covariances are always derived from scales and
    rotations here. If stats is given (the output of render for the same
    field and camera), its grad_norms receive the per-Gaussian magnitude of
    the screen-space position gradient.

    :param field: the field
    :type field: GaussianField
    :param cam: the camera
    :type cam: Camera
    :param cfg: the rasterization options
    :type cfg: RasterConfig
    :param upstream: dLoss/dColor, shape (H, W, 3)
    :type upstream: np.ndarray
    :param upstream_depth: optional dLoss/dDepth, shape (H, W)
    :param upstream_alpha: optional dLoss/dAlpha, shape (H, W)
    :param stats: optional render output to update in place
    :type stats: RenderOutput
    :return: gradients keyed by parameter name, plus "means2d" (N, 2)
    :rtype: dict
    """
    if cfg is None:
        cfg = RasterConfig()
    params = field_tensors(field, requires_grad=True)
    with torch.enable_grad():
        out = render_torch(params, cam, cfg, field.sh_degree_active, _background(field.background, cfg))
        objective = (out["color"] * torch.as_tensor(upstream, dtype=torch.float64)).sum()
        if upstream_depth is not None:
            objective = objective + (out["depth"] * torch.as_tensor(upstream_depth, dtype=torch.float64)).sum()
        if upstream_alpha is not None:
            objective = objective + (out["alpha"] * torch.as_tensor(upstream_alpha, dtype=torch.float64)).sum()
        inputs = [params[name] for name in FIELD_PARAMS] + [out["means2d"]]
        if objective.requires_grad:
            grads = torch.autograd.grad(objective, inputs, allow_unused=True)
        else:
            grads = [None] * len(inputs)
    result = dict()
    for name, tensor, grad in zip(list(FIELD_PARAMS) + ["means2d"], inputs, grads):
        if grad is None:
            result[name] = np.zeros(tuple(tensor.shape))
        else:
            result[name] = grad.detach().numpy().copy()
    if stats is not None:
        if len(stats.grad_norms) != len(field):
            raise DimensionMismatch("Statistics for %d Gaussians, field has %d" % (len(stats.grad_norms), len(field)))
        stats.grad_norms = np.linalg.norm(result["means2d"], axis=1)
    return result
