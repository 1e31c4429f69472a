"""
LiDAR prior: merging sweeps, colorizing by camera projection, filtering and
initializing Gaussian fields from points.
"""
import logging
import os

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from plyfile import PlyData, PlyElement, PlyParseError
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from cgs.api.core import DataError, NonRigidPose, ParseError, TooFewPoints, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField, Z_NEAR, project_points


DOWNSAMPLE_PRESETS = {
    "600k": 600000,
    "1m": 1000000,
    "2m": 2000000,
}

GRAY = 0.5


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.lidar")
    return _logger


@dataclass
class LidarConfig:
    """
    Options for building the point prior.
    """
    voxel_size: float = 0.05
    remove_outliers: bool = True
    outlier_neighbors: int = 8
    outlier_std_ratio: float = 2.0
    downsample: Optional[Union[str, int]] = None
    init_opacity: float = 0.1
    match_timesteps: bool = False

    def validate(self):
        if self.voxel_size <= 0:
            raise ParseError("voxel_size must be positive: %g" % self.voxel_size)
        if not (0.0 < self.init_opacity < 1.0):
            raise ParseError("init_opacity must lie in (0,1): %g" % self.init_opacity)
        if isinstance(self.downsample, str) and (self.downsample.lower() not in DOWNSAMPLE_PRESETS):
            raise ParseError("Unknown downsample preset: %s" % self.downsample)
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "LidarConfig":
        return dataclass_from_dict(cls, d, section="lidar")


class PointCloud:
    """
    Points with optional colors and the timestep of the sweep they came from.
    """

    def __init__(self, positions: np.ndarray, colors: Optional[np.ndarray] = None,
                 has_color: Optional[np.ndarray] = None, timesteps: Optional[np.ndarray] = None):
        """
        :param positions: the positions (N, 3)
        :param colors: the rgb colors in [0,1] (N, 3), None if uncolored
        :param has_color: which colors are present, inferred from colors if None
        :param timesteps: the source timesteps (N,), zeros if None
        """
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if colors is None:
            self.colors = np.zeros((n, 3))
            self.has_color = np.zeros(n, dtype=bool)
        else:
            self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3).copy()
            if has_color is None:
                self.has_color = np.ones(n, dtype=bool)
            else:
                self.has_color = np.asarray(has_color, dtype=bool).reshape(n).copy()
            self.colors[~self.has_color] = 0.0
        if timesteps is None:
            self.timesteps = np.zeros(n, dtype=np.int64)
        else:
            self.timesteps = np.asarray(timesteps, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self):
        if not np.all(np.isfinite(self.positions)):
            raise DataError("Point cloud contains non-finite positions")
        c = self.colors[self.has_color]
        if np.any(c < 0.0) or np.any(c > 1.0):
            raise DataError("Point colors outside [0,1]")
        return self

    def select(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return PointCloud(self.positions[idx], self.colors[idx], self.has_color[idx], self.timesteps[idx])

    def copy(self) -> "PointCloud":
        return self.select(np.arange(len(self)))

    def transform(self, pose: np.ndarray) -> "PointCloud":
        pose = np.asarray(pose, dtype=np.float64)
        result = self.copy()
        result.positions = self.positions @ pose[:3, :3].T + pose[:3, 3]
        return result

    @classmethod
    def concat(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if len(clouds) == 0:
            return cls(np.zeros((0, 3)))
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.has_color for c in clouds]),
            np.concatenate([c.timesteps for c in clouds]))

    def __str__(self):
        return "PointCloud(n=%d, colored=%d)" % (len(self), int(self.has_color.sum()))


def check_rigid(pose: np.ndarray, tol: float = 1e-4, what: str = "pose"):
    """
    Raises NonRigidPose if the rotation block is not orthonormal.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise NonRigidPose("%s must be 4x4, got %s" % (what, str(pose.shape)))
    r = pose[:3, :3]
    if (np.abs(r.T @ r - np.eye(3)).max() > tol) or (np.linalg.det(r) < 0):
        raise NonRigidPose("%s is not a rigid transform" % what)


def merge_sweeps(sweeps: Sequence[Tuple[PointCloud, np.ndarray]]) -> PointCloud:
    """
    Transforms every sweep into the world frame and concatenates them.

    :param sweeps: the (cloud, sweep-to-world pose) pairs
    :return: the merged cloud
    :rtype: PointCloud
    """
    parts = []
    for i, (cloud, pose) in enumerate(sweeps):
        check_rigid(pose, what="sweep %d pose" % i)
        parts.append(cloud.transform(pose))
    result = PointCloud.concat(parts)
    logger().info("Merged %d sweeps into %d points" % (len(parts), len(result)))
    return result


def bilinear_sample(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """
    Samples an (H, W, C) image at sub-pixel (u, v) locations.
    """
    coords = [pixels[:, 1], pixels[:, 0]]
    return np.stack([map_coordinates(image[..., c], coords, order=1, mode="nearest")
                     for c in range(image.shape[2])], axis=-1)


def colorize(cloud: PointCloud, images: Sequence[Tuple[np.ndarray, Camera]], match_timesteps: bool = False) -> PointCloud:
    """
    Colors every point from the camera nearest to it among the cameras that
    see it. Points visible nowhere keep their current color state.

    :param cloud: the cloud to color
    :type cloud: PointCloud
    :param images: the (image, camera) pairs, images (H, W, 3) in [0,1]
    :param match_timesteps: only use cameras of the point's timestep
    :type match_timesteps: bool
    :return: the colored copy
    :rtype: PointCloud
    """
    n = len(cloud)
    best = np.full(n, np.inf)
    colors = cloud.colors.copy()
    has_color = cloud.has_color.copy()
    for image, cam in images:
        image = np.asarray(image, dtype=np.float64)
        pix, depth, valid = project_points(cloud.positions, cam, z_near=Z_NEAR)
        valid &= (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height - 1)
        if match_timesteps:
            valid &= cloud.timesteps == cam.timestep
        dist = np.linalg.norm(cloud.positions - cam.center, axis=1)
        closer = valid & (dist < best)
        if not np.any(closer):
            continue
        colors[closer] = np.clip(bilinear_sample(image, pix[closer]), 0.0, 1.0)
        has_color[closer] = True
        best[closer] = dist[closer]
    logger().info("Colorized %d of %d points" % (int(np.isfinite(best).sum()), n))
    return PointCloud(cloud.positions.copy(), colors, has_color, cloud.timesteps.copy())


def voxel_filter(cloud: PointCloud, voxel: float) -> PointCloud:
    """
    Replaces the points of every occupied voxel by their centroid. The mean
    color uses only members with a color. Sums are taken in sorted order so
    the output does not depend on the input order.

    :param cloud: the cloud
    :type cloud: PointCloud
    :param voxel: the voxel edge length (meters)
    :type voxel: float
    :return: the filtered cloud, ordered by voxel key
    :rtype: PointCloud
    """
    if voxel <= 0:
        raise DataError("Voxel size must be positive: %g" % voxel)
    if len(cloud) == 0:
        return cloud.copy()
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    p = cloud.positions
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = p[order]
    cols = cloud.colors[order]
    has = cloud.has_color[order]
    ts = cloud.timesteps[order]
    change = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.concatenate([[0], np.flatnonzero(change) + 1])
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    centroids = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    n_col = np.add.reduceat(has.astype(np.int64), starts)
    col_sum = np.add.reduceat(cols * has[:, None], starts, axis=0)
    colored = n_col > 0
    mean_col = np.zeros_like(col_sum)
    mean_col[colored] = col_sum[colored] / n_col[colored, None]
    t_min = np.minimum.reduceat(ts, starts)
    logger().info("Voxel filter (%g m): %d -> %d points" % (voxel, len(cloud), len(starts)))
    return PointCloud(centroids, mean_col, colored, t_min)


def remove_outliers(cloud: PointCloud, neighbors: int = 8, std_ratio: float = 2.0) -> PointCloud:
    """
    Statistical outlier removal: drops points whose mean distance to their
    nearest neighbors exceeds the mean of that statistic by std_ratio
    standard deviations.

    :param cloud: the cloud
    :param neighbors: the number of neighbors
    :param std_ratio: the cut-off in standard deviations
    :return: the cleaned cloud
    :rtype: PointCloud
    """
    if len(cloud) <= neighbors:
        return cloud.copy()
    dist, _ = cKDTree(cloud.positions).query(cloud.positions, k=neighbors + 1)
    mean_dist = dist[:, 1:].mean(axis=1)
    limit = mean_dist.mean() + std_ratio * mean_dist.std()
    keep = mean_dist <= limit
    logger().info("Outlier removal dropped %d points" % int((~keep).sum()))
    return cloud.select(keep)


def downsample(cloud: PointCloud, target: Union[str, int], seed: int = 0) -> PointCloud:
    """
    Randomly reduces the cloud to at most target points, keeping input order.

    :param cloud: the cloud
    :param target: the point count or a preset name (600k, 1m, 2m)
    :param seed: the seed of the sampler
    :return: the reduced cloud
    :rtype: PointCloud
    """
    if isinstance(target, str):
        key = target.lower()
        if key not in DOWNSAMPLE_PRESETS:
            raise DataError("Unknown downsample preset: %s" % target)
        target = DOWNSAMPLE_PRESETS[key]
    if len(cloud) <= target:
        return cloud.copy()
    rng = np.random.default_rng(seed)
    return cloud.select(np.sort(rng.choice(len(cloud), size=int(target), replace=False)))


def init_field(cloud: PointCloud, opacity: float = 0.1, neighbors: int = 3) -> GaussianField:
    """
    One isotropic Gaussian per point, sized by the mean distance to the
    nearest neighbors. Uncolored points start mid-gray.

    :param cloud: the point prior
    :type cloud: PointCloud
    :param opacity: the initial activated opacity
    :type opacity: float
    :param neighbors: the neighbors used for the scale
    :type neighbors: int
    :return: the field
    :rtype: GaussianField
    """
    if len(cloud) < neighbors + 1:
        raise TooFewPoints("Need at least %d points, got %d" % (neighbors + 1, len(cloud)))
    dist, _ = cKDTree(cloud.positions).query(cloud.positions, k=neighbors + 1)
    scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    colors = np.where(cloud.has_color[:, None], cloud.colors, GRAY)
    return GaussianField.from_points(cloud.positions.copy(), colors, scale=scale, opacity=opacity)


def init_random_field(n: int, bounds: Tuple[np.ndarray, np.ndarray], seed: int = 0, opacity: float = 0.1) -> GaussianField:
    """
    Random initialization inside the bounds, with random colors.

    :param n: the number of Gaussians
    :param bounds: (min, max) corners
    :param seed: the seed
    :param opacity: the initial activated opacity
    :return: the field
    :rtype: GaussianField
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    pos = lo + rng.random((n, 3)) * (hi - lo)
    cloud = PointCloud(pos, rng.random((n, 3)))
    return init_field(cloud, opacity=opacity)


def split_by_tracks(cloud: PointCloud, tracks: Dict) -> Tuple[PointCloud, Dict[str, PointCloud]]:
    """
    Separates points that fall inside a track's box at their own timestep.
    The inside points are returned in the object's canonical frame.

    :param cloud: the merged cloud
    :param tracks: the tracks, object_id -> BBoxTrack
    :return: tuple of static cloud and canonical clouds per object
    :rtype: tuple
    """
    inside_any = np.zeros(len(cloud), dtype=bool)
    per_object = dict()
    for object_id in sorted(tracks.keys()):
        track = tracks[object_id]
        inside = np.zeros(len(cloud), dtype=bool)
        canonical = np.zeros((len(cloud), 3))
        for t in np.unique(cloud.timesteps):
            if not track.alive(t):
                continue
            idx = np.flatnonzero(cloud.timesteps == t)
            local = track.canonicalize(cloud.positions[idx], t)
            hit = np.all(np.abs(local) <= 0.5 * track.extent_at(t), axis=1)
            inside[idx[hit]] = True
            canonical[idx[hit]] = local[hit]
        part = cloud.select(inside)
        part.positions = canonical[inside]
        per_object[object_id] = part
        inside_any |= inside
        logger().info("Object %s: %d points" % (object_id, int(inside.sum())))
    return cloud.select(~inside_any), per_object


def read_point_cloud(path: str) -> PointCloud:
    """
    Reads a binary PLY (x, y, z, optional red/green/blue uint8, optional
    timestep) or an .xyz text file (x y z [r g b [timestep]], rgb 0-255).

    :param path: the file to read
    :type path: str
    :return: the cloud
    :rtype: PointCloud
    """
    if not os.path.exists(path):
        raise IOError("Point cloud does not exist: %s" % path)
    if path.lower().endswith(".ply"):
        try:
            data = PlyData.read(path)
            v = data["vertex"]
            names = [p.name for p in v.properties]
            pos = np.stack([np.asarray(v["x"]), np.asarray(v["y"]), np.asarray(v["z"])], axis=1)
            colors = None
            if all(c in names for c in ["red", "green", "blue"]):
                colors = np.stack([np.asarray(v[c]) for c in ["red", "green", "blue"]], axis=1) / 255.0
            ts = np.asarray(v["timestep"]) if "timestep" in names else None
        except (PlyParseError, ValueError, KeyError, IndexError) as e:
            raise ParseError("Failed to parse PLY %s: %s" % (path, str(e)))
        return PointCloud(pos, colors, timesteps=ts)
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as e:
        raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    if (len(data) > 0) and (data.shape[1] not in (3, 6, 7)):
        raise ParseError("Expected 3, 6 or 7 columns in %s, got %d" % (path, data.shape[1]))
    if len(data) == 0:
        return PointCloud(np.zeros((0, 3)))
    colors = data[:, 3:6] / 255.0 if data.shape[1] >= 6 else None
    ts = data[:, 6] if data.shape[1] == 7 else None
    return PointCloud(data[:, :3], colors, timesteps=ts)


def write_point_cloud(path: str, cloud: PointCloud):
    """
    Writes the cloud as binary little-endian PLY. Colors are written only if
    every point has one.

    :param path: the output file
    :type path: str
    :param cloud: the cloud
    :type cloud: PointCloud
    """
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    colored = (len(cloud) > 0) and bool(np.all(cloud.has_color))
    if colored:
        dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    dtype += [("timestep", "<i4")]
    arr = np.empty(len(cloud), dtype=dtype)
    arr["x"], arr["y"], arr["z"] = cloud.positions[:, 0], cloud.positions[:, 1], cloud.positions[:, 2]
    if colored:
        rgb = np.round(np.clip(cloud.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
        arr["red"], arr["green"], arr["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    arr["timestep"] = cloud.timesteps
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(path)
    logger().info("Wrote %d points to %s" % (len(cloud), path))


def build_prior(cloud: PointCloud, images: Sequence[Tuple[np.ndarray, Camera]], cfg: LidarConfig = None) -> PointCloud:
    """
    Colorizes, optionally removes outliers and downsamples, then voxel-filters.

    :param cloud: the merged cloud
    :param images: the (image, camera) pairs used for colors
    :param cfg: the options
    :type cfg: LidarConfig
    :return: the prior
    :rtype: PointCloud
    """
    if cfg is None:
        cfg = LidarConfig()
    result = colorize(cloud, images, match_timesteps=cfg.match_timesteps)
    if cfg.remove_outliers:
        result = remove_outliers(result, neighbors=cfg.outlier_neighbors, std_ratio=cfg.outlier_std_ratio)
    if cfg.downsample is not None:
        result = downsample(result, cfg.downsample)
    return voxel_filter(result, cfg.voxel_size)
