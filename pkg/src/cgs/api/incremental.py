"""
Incremental reconstruction of the static background: the sequence is split
into overlapping runs of timesteps (bins) that are trained one after the
other, each fused into the field accumulated so far.
"""
import logging
import math

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cgs.api.core import InsufficientFrames, NoVisibility, ParseError, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField, project_points
from cgs.api.lidar import PointCloud, init_field, init_random_field
from cgs.api.optimizer import LossRecord, TrainConfig, TrainResult, train
from cgs.api.rasterizer import RasterConfig


INIT_LIDAR = "lidar"

INIT_RANDOM = "random"

INIT_METHODS = [INIT_LIDAR, INIT_RANDOM]


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.incremental")
    return _logger


@dataclass
class IncrementalConfig:
    """
    Binning options. n_bins=None derives the count from the depth range.
    """
    n_bins: Optional[int] = None
    overlap: int = 1
    bin_depth: float = 30.0
    iterations_per_bin: Optional[int] = None

    def validate(self):
        if (self.n_bins is not None) and (self.n_bins < 1):
            raise ParseError("n_bins must be at least 1: %d" % self.n_bins)
        if self.overlap < 0:
            raise ParseError("overlap must not be negative: %d" % self.overlap)
        if self.bin_depth <= 0:
            raise ParseError("bin_depth must be positive: %g" % self.bin_depth)
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "IncrementalConfig":
        return dataclass_from_dict(cls, d, section="incremental")


@dataclass
class Bin:
    """
    One run of timesteps with its supervision frames.
    """
    index: int
    timesteps: List[int]
    frames: List[Tuple[np.ndarray, Camera]] = dc_field(default_factory=list)
    overlap_frames_with_previous: int = 0

    @property
    def t_start(self) -> int:
        return self.timesteps[0]

    @property
    def t_end(self) -> int:
        return self.timesteps[-1]


@dataclass
class BinSchedule:
    bins: List[Bin]

    def __len__(self) -> int:
        return len(self.bins)

    def to_dict(self) -> Dict:
        """
        The JSON form, frames are referenced by (camera_id, timestep).
        """
        return {
            "bins": [{
                "index": b.index,
                "timestep_range": [b.t_start, b.t_end],
                "frames": [[cam.camera_id, int(cam.timestep)] for _, cam in b.frames],
                "overlap_frames_with_previous": b.overlap_frames_with_previous,
            } for b in self.bins]
        }

    @classmethod
    def from_dict(cls, d: Dict, frames: Sequence[Tuple[np.ndarray, Camera]] = ()) -> "BinSchedule":
        """
        Restores a schedule, attaching the given frames by timestep.
        """
        bins = []
        for entry in d["bins"]:
            t0, t1 = entry["timestep_range"]
            timesteps = list(range(int(t0), int(t1) + 1))
            members = [f for f in frames if f[1].timestep in timesteps]
            bins.append(Bin(int(entry["index"]), timesteps, members, int(entry.get("overlap_frames_with_previous", 0))))
        return cls(bins)


def _timesteps(frames: Sequence[Tuple[np.ndarray, Camera]]) -> List[int]:
    return sorted(set(int(cam.timestep) for _, cam in frames))


def partition_bins(frames: Sequence[Tuple[np.ndarray, Camera]], n_bins: int, overlap: int = 1) -> BinSchedule:
    """
    Splits the timesteps into n_bins near-equal contiguous runs and extends
    every bin after the first backward by overlap timesteps.

    :param frames: the (image, camera) pairs
    :param n_bins: the number of bins
    :type n_bins: int
    :param overlap: the timesteps shared with the previous bin
    :type overlap: int
    :return: the schedule
    :rtype: BinSchedule
    """
    if n_bins < 1:
        raise InsufficientFrames("n_bins must be at least 1: %d" % n_bins)
    if (n_bins > 1) and (overlap < 1):
        raise InsufficientFrames("Bins must overlap by at least one timestep")
    timesteps = _timesteps(frames)
    if len(timesteps) < n_bins:
        raise InsufficientFrames("Cannot split %d timesteps into %d bins" % (len(timesteps), n_bins))
    runs = [list(r) for r in np.array_split(np.asarray(timesteps), n_bins)]
    bins = []
    start = 0
    for i, run in enumerate(runs):
        lo = start if i == 0 else max(0, start - overlap)
        members = timesteps[lo:start + len(run)]
        shared = set(timesteps[lo:start])
        frames_in = [f for f in frames if f[1].timestep in members]
        n_shared = sum(1 for f in frames_in if f[1].timestep in shared)
        bins.append(Bin(i, [int(t) for t in members], frames_in, n_shared))
        start += len(run)
    logger().info("Partitioned %d timesteps into %d bins: %s" % (
        len(timesteps), n_bins, ", ".join("[%d..%d]" % (b.t_start, b.t_end) for b in bins)))
    return BinSchedule(bins)


def bins_from_depth_range(cloud: PointCloud, bin_depth: float = 30.0) -> int:
    """
    Number of bins from the extent of the LiDAR prior: ceil(diameter / bin_depth), at least 1.

    :param cloud: the prior
    :type cloud: PointCloud
    :param bin_depth: the depth covered by one bin (meters)
    :type bin_depth: float
    :return: the bin count
    :rtype: int
    """
    if len(cloud) == 0:
        return 1
    diameter = float(np.linalg.norm(cloud.positions.max(axis=0) - cloud.positions.min(axis=0)))
    return max(1, int(math.ceil(diameter / bin_depth)))


def fuse_bin(accumulated: GaussianField, bin_init: GaussianField) -> GaussianField:
    """
    Union of the accumulated field and the Gaussians of a new bin. The
    accumulated Gaussians are flagged position-frozen for the warm-up of the
    next training pass.

    :param accumulated: the field trained so far
    :type accumulated: GaussianField
    :param bin_init: the Gaussians initialized for the new bin
    :type bin_init: GaussianField
    :return: the fused field, accumulated rows first
    :rtype: GaussianField
    """
    if len(bin_init) == 0:
        return accumulated.copy()
    old = accumulated.copy()
    old.position_frozen = np.ones(len(old), dtype=bool)
    new = bin_init.copy()
    new.position_frozen = np.zeros(len(new), dtype=bool)
    if len(old) == 0:
        new.background = accumulated.background.copy()
        new.sh_degree_active = accumulated.sh_degree_active
        return new
    return GaussianField.concat([old, new])


def _visibility(positions: np.ndarray, cameras: Sequence[Camera]) -> np.ndarray:
    """
    Unnormalized cos/d^2 weights, shape (N, C), zero where invisible.
    """
    result = np.zeros((len(positions), len(cameras)))
    for j, cam in enumerate(cameras):
        pix, _, valid = project_points(positions, cam)
        valid &= (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height - 1)
        d = positions - cam.center
        dist = np.linalg.norm(d, axis=1)
        cos = (d @ cam.forward) / np.maximum(dist, 1e-12)
        result[valid, j] = cos[valid] / (dist[valid] ** 2)
    return result


def view_weights(gaussian_position: np.ndarray, cameras: Sequence[Camera]) -> np.ndarray:
    """
    Per-camera weight of a position: cosine between the optical axis and the
    direction to the point, over the squared distance, normalized over the
    cameras that see the point.

    :param gaussian_position: the world position
    :param cameras: the cameras
    :return: the weights, zero for cameras that do not see the point
    :rtype: np.ndarray
    """
    w = _visibility(np.asarray(gaussian_position, dtype=np.float64).reshape(1, 3), cameras)[0]
    total = w.sum()
    if total <= 0:
        raise NoVisibility("No camera sees %s" % str(gaussian_position))
    return w / total


def supervision_weights(field: GaussianField, cameras: Sequence[Camera]) -> np.ndarray:
    """
    Per-view training weights: the mean of the per-Gaussian view weights
    over the Gaussians each camera sees, rescaled to mean 1.

    :param field: the field
    :param cameras: the supervision cameras
    :return: one weight per camera
    :rtype: np.ndarray
    """
    if (len(field) == 0) or (len(cameras) == 0):
        return np.ones(len(cameras))
    w = _visibility(field.positions, cameras)
    totals = w.sum(axis=1)
    seen = totals > 0
    if not np.any(seen):
        return np.ones(len(cameras))
    w = w[seen] / totals[seen, None]
    per_view = w.mean(axis=0)
    mean = per_view.mean()
    if mean <= 0:
        return np.ones(len(cameras))
    return per_view / mean


def _init_bin(points: PointCloud, init: str, seed: int, opacity: float) -> GaussianField:
    if len(points) < 4:
        return GaussianField.empty()
    if init == INIT_RANDOM:
        lo, hi = points.positions.min(axis=0), points.positions.max(axis=0)
        return init_random_field(len(points), (lo, hi), seed=seed, opacity=opacity)
    return init_field(points, opacity=opacity)


def train_incremental(cloud: PointCloud, schedule: BinSchedule, cfg: TrainConfig = None,
                      inc: IncrementalConfig = None, raster: RasterConfig = None, init: str = INIT_LIDAR,
                      background: Optional[np.ndarray] = None, ignore_masks: Optional[Dict] = None,
                      init_opacity: float = 0.1, on_bin: Optional[Callable[[Bin, GaussianField], None]] = None) -> TrainResult:
    """
    Trains the static field bin by bin. The Gaussians of bin b come from the
    prior points whose timestep lies in bin b and in no earlier bin.

    :param cloud: the static point prior
    :type cloud: PointCloud
    :param schedule: the bins
    :type schedule: BinSchedule
    :param cfg: the training options, total_iterations is split across bins
    :type cfg: TrainConfig
    :param inc: the binning options
    :type inc: IncrementalConfig
    :param raster: the rasterization options
    :param init: the initialization, lidar or random
    :type init: str
    :param background: the background color of the field
    :param ignore_masks: optional (camera_id, timestep) -> H x W mask of pixels excluded from supervision
    :param init_opacity: the initial activated opacity
    :param on_bin: called with every bin and the field after its training
    :return: the trained field and the concatenated loss history
    :rtype: TrainResult
    """
    if cfg is None:
        cfg = TrainConfig()
    if inc is None:
        inc = IncrementalConfig()
    if init not in INIT_METHODS:
        raise ParseError("Unknown initialization: %s" % init)
    if ignore_masks is None:
        ignore_masks = dict()
    per_bin = inc.iterations_per_bin
    if per_bin is None:
        per_bin = max(1, cfg.total_iterations // max(1, len(schedule)))
    field = GaussianField.empty(background=background)
    assigned = set()
    history: List[LossRecord] = []
    offset = 0
    for b in schedule.bins:
        fresh = [t for t in b.timesteps if t not in assigned]
        points = cloud.select(np.isin(cloud.timesteps, fresh))
        bin_init = _init_bin(points, init, cfg.seed + b.index, init_opacity)
        field = fuse_bin(field, bin_init)
        assigned.update(b.timesteps)
        if len(field) == 0:
            logger().warning("Bin %d has no Gaussians, skipping" % b.index)
            continue
        cameras = [cam for _, cam in b.frames]
        weights = supervision_weights(field, cameras)
        supervision = []
        for (image, cam), w in zip(b.frames, weights):
            mask = ignore_masks.get((cam.camera_id, int(cam.timestep)))
            supervision.append((image, cam, float(w), mask))
        prior = cloud.select(np.isin(cloud.timesteps, sorted(assigned)))
        logger().info("Training bin %d (t=%d..%d): %d Gaussians, %d views, %d iterations" % (
            b.index, b.t_start, b.t_end, len(field), len(supervision), per_bin))
        result = train(field, supervision, prior, replace(cfg, total_iterations=per_bin, seed=cfg.seed + b.index),
                       raster=raster, sh_degree_start=min(cfg.max_sh_degree, offset // cfg.sh_degree_interval))
        field = result.field
        field.position_frozen = None
        for r in result.history:
            history.append(replace(r, iteration=r.iteration + offset))
        offset += per_bin
        if on_bin is not None:
            on_bin(b, field)
    return TrainResult(field, history)
