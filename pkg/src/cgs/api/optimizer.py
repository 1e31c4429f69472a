"""
Training loop for Gaussian fields: the weighted loss suite, a numpy Adam
with named parameter groups, densification, pruning and opacity resets.
"""
import csv
import logging
import math

from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from cgs.api.core import BadKappa, NumericError, ParseError, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField, logit, normalize_quaternion, quaternion_to_matrix
from cgs.api.losses import lidar_loss, robust_loss, tssim_loss, LIDAR_SAMPLES
from cgs.api.rasterizer import FIELD_PARAMS, RasterConfig, field_tensors, render_torch
from cgs.api.sh import MAX_SH_DEGREE


PARAM_GROUPS = ("positions", "log_scales", "rotations", "sh_dc", "sh_rest", "opacity_logits")

SPLIT_CHILDREN = 2

SPLIT_SCALE_DIVISOR = 1.6


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.optimizer")
    return _logger


@dataclass
class TrainConfig:
    """
    Training hyperparameters. Position learning rates of the static field are
    multiplied by the scene extent, the dynamic ones are absolute.
    """
    total_iterations: int = 50000
    seed: int = 0
    lambda_tssim: float = 0.2
    lambda_robust: float = 0.8
    lambda_lidar: float = 0.1
    kappa: float = 0.9
    tssim_tiles: Sequence[int] = (4, 4)
    lidar_samples: int = LIDAR_SAMPLES
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    dynamic_position_lr_init: float = 1.6e-3
    dynamic_position_lr_final: float = 1.6e-6
    position_lr_max_steps: Optional[int] = None
    sh_lr: float = 0.0025
    sh_rest_lr_divisor: float = 20.0
    opacity_lr: float = 0.05
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    densify: bool = True
    densify_grad_threshold: float = 0.001
    densify_from_iter: int = 500
    densify_until_iter: int = 15000
    densify_interval: int = 100
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 900
    reset_opacity: float = 0.01
    sh_degree_interval: int = 1000
    max_sh_degree: int = MAX_SH_DEGREE
    freeze_iterations: int = 500
    log_interval: int = 100

    def validate(self):
        if not (0.0 < self.kappa <= 1.0):
            raise BadKappa("kappa must lie in (0,1]: %g" % self.kappa)
        if self.total_iterations < 0:
            raise ParseError("total_iterations must not be negative")
        for name in ["densify_grad_threshold", "opacity_reset_interval", "densify_interval", "sh_degree_interval",
                     "position_lr_init", "position_lr_final", "dynamic_position_lr_init",
                     "dynamic_position_lr_final", "percent_dense"]:
            if getattr(self, name) <= 0:
                raise ParseError("%s must be positive" % name)
        for name in ["lambda_tssim", "lambda_robust", "lambda_lidar"]:
            if getattr(self, name) < 0:
                raise ParseError("%s must not be negative" % name)
        if not (0 <= self.max_sh_degree <= MAX_SH_DEGREE):
            raise ParseError("max_sh_degree must lie in 0..%d" % MAX_SH_DEGREE)
        self.tssim_tiles = tuple(int(x) for x in (
            [self.tssim_tiles, self.tssim_tiles] if isinstance(self.tssim_tiles, int) else self.tssim_tiles))
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        return dataclass_from_dict(cls, d, section="train")


@dataclass
class LossRecord:
    iteration: int
    l_tssim: float
    l_robust: float
    l_lidar: float
    total: float


@dataclass
class TrainResult:
    field: GaussianField
    history: List[LossRecord] = dc_field(default_factory=list)


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """
    Log-linear interpolation between lr_init (step 0) and lr_final (max_steps).

    :param step: the current step
    :type step: int
    :param lr_init: the initial rate
    :param lr_final: the final rate
    :param max_steps: the step at which lr_final is reached
    :return: the learning rate
    :rtype: float
    """
    if max_steps <= 0:
        return lr_final
    t = min(max(step / float(max_steps), 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr_init) + t * math.log(lr_final))


def learning_rates(iteration: int, cfg: TrainConfig, extent: float = 1.0, dynamic: bool = False) -> Dict[str, float]:
    """
    The learning rate of every parameter group at the iteration.
    """
    max_steps = cfg.position_lr_max_steps or cfg.total_iterations
    if dynamic:
        pos = expon_lr(iteration, cfg.dynamic_position_lr_init, cfg.dynamic_position_lr_final, max_steps)
    else:
        pos = expon_lr(iteration, cfg.position_lr_init * extent, cfg.position_lr_final * extent, max_steps)
    return {
        "positions": pos,
        "log_scales": cfg.scaling_lr,
        "rotations": cfg.rotation_lr,
        "sh_dc": cfg.sh_lr,
        "sh_rest": cfg.sh_lr / cfg.sh_rest_lr_divisor,
        "opacity_logits": cfg.opacity_lr,
    }


def _group_values(arrays: Dict[str, np.ndarray], group: str) -> np.ndarray:
    if group == "sh_dc":
        return arrays["sh_coeffs"][:, :1]
    if group == "sh_rest":
        return arrays["sh_coeffs"][:, 1:]
    return arrays[group]


class AdamState:
    """
    Bias-corrected first and second moments per named parameter group.
    Rows follow the Gaussians, see remap.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.moments = dict()

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float,
               frozen: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Applies one update to a parameter array and returns the new values.
        The step counter is advanced separately via tick().

        :param name: the group name
        :param param: the current values
        :param grad: the gradient, same shape
        :param lr: the learning rate
        :param frozen: optional per-row mask of rows that are left alone
        :return: the updated values
        """
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(param), np.zeros_like(param))
        m, v = self.moments[name]
        m_new = self.beta1 * m + (1.0 - self.beta1) * grad
        v_new = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        t = max(self.steps, 1)
        m_hat = m_new / (1.0 - self.beta1 ** t)
        v_hat = v_new / (1.0 - self.beta2 ** t)
        result = param - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if frozen is not None and np.any(frozen):
            result[frozen] = param[frozen]
            m_new[frozen] = m[frozen]
            v_new[frozen] = v[frozen]
        self.moments[name] = (m_new, v_new)
        return result

    def tick(self):
        self.steps += 1

    def remap(self, source: np.ndarray):
        """
        Rearranges the moment rows after densification. source[i] is the old
        row of new row i, or -1 for a fresh row with zero moments.

        :param source: the mapping new -> old
        :type source: np.ndarray
        """
        source = np.asarray(source, dtype=np.int64)
        fresh = source < 0
        for name, (m, v) in list(self.moments.items()):
            if len(m) == 0:
                self.moments[name] = (np.zeros((len(source),) + m.shape[1:]), np.zeros((len(source),) + v.shape[1:]))
                continue
            m_new = m[np.where(fresh, 0, source)].copy()
            v_new = v[np.where(fresh, 0, source)].copy()
            m_new[fresh] = 0.0
            v_new[fresh] = 0.0
            self.moments[name] = (m_new, v_new)


def step(field: GaussianField, gradients: Dict[str, np.ndarray], iteration: int, cfg: TrainConfig,
         state: AdamState = None, extent: float = 1.0, dynamic: bool = False) -> GaussianField:
    """
    One Adam update of all parameter groups. Rows flagged position-frozen
    keep their positions.

    :param field: the current field
    :type field: GaussianField
    :param gradients: gradients keyed like the field arrays
    :type gradients: dict
    :param iteration: the iteration, drives the position schedule
    :type iteration: int
    :param cfg: the training options
    :type cfg: TrainConfig
    :param state: the optimizer state, a fresh one if None
    :type state: AdamState
    :param extent: the scene extent multiplying static position rates
    :param dynamic: whether to use the dynamic-node position schedule
    :return: the updated field
    :rtype: GaussianField
    """
    if state is None:
        state = AdamState()
    state.tick()
    lrs = learning_rates(iteration, cfg, extent=extent, dynamic=dynamic)
    current = {name: getattr(field, name) for name in FIELD_PARAMS}
    updated = dict()
    for group in PARAM_GROUPS:
        frozen = field.position_frozen if group == "positions" else None
        updated[group] = state.update(group, _group_values(current, group).copy(),
                                      _group_values(gradients, group), lrs[group], frozen=frozen)
    result = field.copy()
    result.positions = updated["positions"]
    result.log_scales = updated["log_scales"]
    result.rotations = normalize_quaternion(updated["rotations"])
    result.sh_coeffs = np.concatenate([updated["sh_dc"], updated["sh_rest"]], axis=1)
    result.opacity_logits = updated["opacity_logits"]
    result.covariances = None
    return result


def reset_opacity(field: GaussianField, value: float = 0.01) -> GaussianField:
    """
    Caps all activated opacities at value.
    """
    result = field.copy()
    result.opacity_logits = np.minimum(field.opacity_logits, logit(value))
    return result


def densify_and_prune(field: GaussianField, stats: np.ndarray, iteration: int, cfg: TrainConfig,
                      extent: float = 1.0, rng: Optional[np.random.Generator] = None) -> Tuple[GaussianField, np.ndarray, np.ndarray]:
    """
    Clones small and splits large Gaussians whose mean screen-space position
    gradient reaches the threshold, prunes nearly transparent ones and resets
    opacities at the reset interval. Surviving Gaussians keep their relative
    order, new ones are appended (clones, then split children).

    :param field: the field
    :type field: GaussianField
    :param stats: per-Gaussian mean 2D position gradient magnitude
    :type stats: np.ndarray
    :param iteration: the iteration
    :type iteration: int
    :param cfg: the options
    :type cfg: TrainConfig
    :param extent: the scene extent, the size cap is percent_dense * extent
    :type extent: float
    :param rng: the generator for split offsets
    :return: the new field, the mapping new -> old (copies map to their parent)
             and the mask of new rows (clones and split children)
    :rtype: tuple
    """
    if rng is None:
        rng = np.random.default_rng(iteration)
    n = len(field)
    stats = np.nan_to_num(np.asarray(stats, dtype=np.float64).reshape(n))
    max_scale = np.exp(field.log_scales).max(axis=1) if n > 0 else np.zeros(0)
    hot = stats >= cfg.densify_grad_threshold
    size_cap = cfg.percent_dense * extent
    clone_idx = np.flatnonzero(hot & (max_scale <= size_cap))
    split_idx = np.flatnonzero(hot & (max_scale > size_cap))

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    parts = [field.select(np.flatnonzero(keep)), field.select(clone_idx)]
    sources = [np.flatnonzero(keep), clone_idx]
    if len(split_idx) > 0:
        parent = np.repeat(split_idx, SPLIT_CHILDREN)
        children = field.select(parent)
        stds = np.exp(field.log_scales[parent])
        offsets = rng.normal(size=(len(parent), 3)) * stds
        rot = quaternion_to_matrix(field.rotations[parent])
        children.positions = field.positions[parent] + np.einsum("nij,nj->ni", rot, offsets)
        children.log_scales = field.log_scales[parent] - math.log(SPLIT_SCALE_DIVISOR)
        parts.append(children)
        sources.append(parent)
    result = GaussianField.concat(parts)
    result.sh_degree_active = field.sh_degree_active
    result.background = field.background.copy()
    source = np.concatenate(sources)
    fresh = np.arange(len(source)) >= int(keep.sum())

    alive = result.opacities >= cfg.prune_opacity
    if not np.all(alive):
        result = result.select(alive)
        source = source[alive]
        fresh = fresh[alive]
    if (iteration > 0) and (iteration % cfg.opacity_reset_interval == 0):
        result = reset_opacity(result, cfg.reset_opacity)
    logger().debug("Densify @%d: clone=%d split=%d pruned=%d -> %d" % (
        iteration, len(clone_idx), len(split_idx), int((~alive).sum()), len(result)))
    return result, source, fresh


def scene_extent(cameras: Sequence[Camera]) -> float:
    """
    Radius of the camera centers around their mean, times 1.1 (at least 1).
    """
    centers = np.stack([c.center for c in cameras])
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max() * 1.1
    return float(max(radius, 1.0))


def _prior_points(prior) -> np.ndarray:
    if prior is None:
        return np.zeros((0, 3))
    return np.asarray(getattr(prior, "positions", prior), dtype=np.float64).reshape(-1, 3)


WorldFn = Callable[[Dict[str, torch.Tensor], Camera], Optional[Dict[str, torch.Tensor]]]


def total_loss(params: Dict[str, torch.Tensor], image: np.ndarray, cam: Camera, weight: float, prior_points: np.ndarray,
               cfg: TrainConfig, raster: RasterConfig, sh_degree: int, background: np.ndarray,
               rng: Optional[np.random.Generator] = None, world_fn: Optional[WorldFn] = None,
               ignore_mask: Optional[np.ndarray] = None):
    """
    Renders the trainable parameters and evaluates the weighted loss. Pixels
    flagged in ignore_mask take the rendered value as target.

    :return: tuple of total loss tensor, the render dictionary (None if the
             world function skipped the view) and the loss terms as floats
    :rtype: tuple
    """
    world = params if world_fn is None else world_fn(params, cam)
    l_lidar = torch.zeros((), dtype=torch.float64)
    if (cfg.lambda_lidar > 0) and (len(prior_points) > 0) and (len(params["positions"]) > 0):
        l_lidar = lidar_loss(params["positions"], prior_points, samples=cfg.lidar_samples, rng=rng)
    if world is None:
        total = cfg.lambda_lidar * l_lidar
        return total, None, (0.0, 0.0, float(l_lidar.detach()))
    out = render_torch(world, cam, raster, sh_degree, background)
    target = torch.as_tensor(np.asarray(image, dtype=np.float64))
    if ignore_mask is not None:
        keep = torch.as_tensor(~np.asarray(ignore_mask, dtype=bool))[..., None]
        target = torch.where(keep, target, out["color"].detach())
    l_tssim = tssim_loss(out["color"], target, cfg.tssim_tiles)
    l_robust = robust_loss(out["color"], target, cfg.kappa)
    total = weight * (cfg.lambda_tssim * l_tssim + cfg.lambda_robust * l_robust) + cfg.lambda_lidar * l_lidar
    return total, out, (float(l_tssim.detach()), float(l_robust.detach()), float(l_lidar.detach()))


def _unpack_view(view) -> Tuple[np.ndarray, Camera, float, Optional[np.ndarray]]:
    if len(view) == 4:
        return view[0], view[1], float(view[2]), view[3]
    return view[0], view[1], float(view[2]), None


def train(initial: GaussianField, supervision: Sequence[Tuple[np.ndarray, Camera, float]], prior, cfg: TrainConfig = None,
          raster: RasterConfig = None, world_fn: Optional[WorldFn] = None, dynamic: bool = False,
          extent: Optional[float] = None, sh_degree_start: int = 0) -> TrainResult:
    """
    Optimizes the field against the supervision views, one view per
    iteration in seeded random order.

    :param initial: the starting field
    :type initial: GaussianField
    :param supervision: the (image, camera, weight) triplets, optionally with
                        a fourth element, the mask of pixels to ignore
    :param prior: the point prior for the LiDAR term (PointCloud, array or None)
    :param cfg: the training options
    :type cfg: TrainConfig
    :param raster: the rasterization options
    :type raster: RasterConfig
    :param world_fn: optional map from trainable tensors to the world-space tensors
                     that are rendered for a camera (used for dynamic nodes)
    :param dynamic: whether the dynamic position schedule applies
    :type dynamic: bool
    :param extent: the scene extent, derived from the cameras if None
    :param sh_degree_start: the SH degree at the first iteration, raised every sh_degree_interval
    :type sh_degree_start: int
    :return: the trained field and the loss history
    :rtype: TrainResult
    """
    if cfg is None:
        cfg = TrainConfig()
    if raster is None:
        raster = RasterConfig()
    if len(supervision) == 0:
        raise ParseError("Training requires at least one supervision view")
    if cfg.total_iterations == 0:
        return TrainResult(initial.copy(), [])
    if extent is None:
        extent = scene_extent([s[1] for s in supervision])
    rng = np.random.default_rng(cfg.seed)
    prior_points = _prior_points(prior)
    field = initial.copy()
    field.covariances = None
    state = AdamState()
    history = []
    grad_accum = np.zeros(len(field))
    grad_count = np.zeros(len(field))
    order = []

    for it in range(1, cfg.total_iterations + 1):
        if len(order) == 0:
            order = list(rng.permutation(len(supervision)))
        image, cam, weight, ignore_mask = _unpack_view(supervision[order.pop(0)])
        if it > cfg.freeze_iterations and field.position_frozen is not None:
            logger().info("Releasing position freeze at iteration %d" % it)
            field.position_frozen = None
        degree = min(cfg.max_sh_degree, sh_degree_start + (it - 1) // cfg.sh_degree_interval)
        field.sh_degree_active = degree

        params = field_tensors(field, requires_grad=True)
        with torch.enable_grad():
            total, out, terms = total_loss(params, image, cam, weight, prior_points, cfg, raster, degree,
                                           field.background, rng=rng, world_fn=world_fn,
                                           ignore_mask=ignore_mask)
            if not torch.isfinite(total):
                raise NumericError("Non-finite loss at iteration %d" % it)
            inputs = [params[name] for name in FIELD_PARAMS]
            if out is not None:
                inputs.append(out["means2d"])
            if total.requires_grad:
                grads = torch.autograd.grad(total, inputs, allow_unused=True)
            else:
                grads = [None] * len(inputs)
        gradients = dict()
        for name, tensor, grad in zip(FIELD_PARAMS, inputs, grads):
            gradients[name] = np.zeros(tuple(tensor.shape)) if grad is None else grad.numpy()
            if not np.all(np.isfinite(gradients[name])):
                raise NumericError("Non-finite gradient for %s at iteration %d" % (name, it))
        field = step(field, gradients, it, cfg, state=state, extent=extent, dynamic=dynamic)

        if (world_fn is None) and (out is not None) and (grads[-1] is not None):
            touched = out["touched"].numpy() > 0
            norms = np.linalg.norm(grads[-1].numpy(), axis=1)
            grad_accum[touched] += norms[touched]
            grad_count[touched] += 1

        history.append(LossRecord(it, terms[0], terms[1], terms[2], float(total.detach())))
        if it % cfg.log_interval == 0:
            logger().info("Iteration %d/%d: loss=%.6f (tssim=%.4f robust=%.4f lidar=%.6f) n=%d" % (
                it, cfg.total_iterations, history[-1].total, terms[0], terms[1], terms[2], len(field)))

        if cfg.densify and (cfg.densify_from_iter < it <= cfg.densify_until_iter):
            if it % cfg.densify_interval == 0:
                stats = grad_accum / np.maximum(grad_count, 1.0)
                field, source, fresh = densify_and_prune(field, stats, it, cfg, extent=extent, rng=rng)
                state.remap(np.where(fresh, -1, source))
                grad_accum = np.zeros(len(field))
                grad_count = np.zeros(len(field))
            elif it % cfg.opacity_reset_interval == 0:
                field = reset_opacity(field, cfg.reset_opacity)

    field.sh_degree_active = min(cfg.max_sh_degree, sh_degree_start + cfg.total_iterations // cfg.sh_degree_interval)
    return TrainResult(field, history)


def write_loss_history(path: str, history: Sequence[LossRecord]):
    """
    Writes the loss history as CSV (iteration, l_tssim, l_robust, l_lidar, total).

    :param path: the output file
    :type path: str
    :param history: the records
    """
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["iteration", "l_tssim", "l_robust", "l_lidar", "total"])
        for r in history:
            writer.writerow([r.iteration, repr(r.l_tssim), repr(r.l_robust), repr(r.l_lidar), repr(r.total)])
    logger().info("Wrote loss history to %s" % path)
