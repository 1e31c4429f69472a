"""
Object removal and insertion, and the masks and image pairs exchanged with
an external inpainting service.
"""
import logging
import os
import re

from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from scipy.spatial import cKDTree

from cgs.api.core import BadTrajectory, DegenerateAsset, EmptyInput, UnknownObject
from cgs.api.gaussians import Camera, GaussianField, logit
from cgs.api.graph import BBoxTrack, GaussianGraph, TrackEntry, add_node
from cgs.api.rasterizer import RasterConfig, render
from cgs.api.sceneio import read_image, write_image, write_mask
from cgs.api.sh import NUM_SH_COEFFS, rgb_to_sh
from cgs.api.trajectory import Waypoint, check_waypoints


MASK_OPACITY = 0.99

MASK_ALPHA_THRESHOLD = 0.5

MIN_ASSET_EXTENT = 1e-3


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.objects")
    return _logger


BBox = Tuple[Sequence[float], Sequence[float]]


def _inside(positions: np.ndarray, bbox: BBox) -> np.ndarray:
    lo = np.asarray(bbox[0], dtype=np.float64).reshape(3)
    hi = np.asarray(bbox[1], dtype=np.float64).reshape(3)
    return np.all((positions >= lo) & (positions <= hi), axis=1)


def remove_object(field: GaussianField, target: Union[str, BBox]) -> Tuple[GaussianField, GaussianField]:
    """
    Removes the Gaussians tagged with an object id or with centers inside an
    axis-aligned world box. The remaining Gaussians keep their order and
    values.

    :param field: the composite field
    :type field: GaussianField
    :param target: the object id or the box (p_min, p_max)
    :return: tuple of remaining and removed Gaussians
    :rtype: tuple
    """
    if isinstance(target, str):
        hit = field.provenance == target
        if not np.any(hit):
            raise UnknownObject("No Gaussians belong to object: %s" % target)
    else:
        hit = _inside(field.positions, target)
    logger().info("Removing %d of %d Gaussians" % (int(hit.sum()), len(field)))
    return field.select(~hit), field.select(hit)


def remove_from_scene(static: GaussianField, graph: GaussianGraph, target: Union[str, BBox]) \
        -> Tuple[GaussianField, GaussianGraph, Optional[str]]:
    """
    Scene-level removal: an object id drops the node from the graph (and any
    static Gaussians carrying that id), a box crops the static field.

    :return: tuple of static field, graph and removed object id (None for a box)
    :rtype: tuple
    """
    if isinstance(target, str):
        in_static = np.any(static.provenance == target)
        if (target not in graph) and not in_static:
            raise UnknownObject("Unknown object: %s" % target)
        nodes = {k: v for k, v in graph.nodes.items() if k != target}
        if in_static:
            static, _ = remove_object(static, target)
        return static, GaussianGraph(nodes), target
    static, _ = remove_object(static, target)
    return static, GaussianGraph(dict(graph.nodes)), None


def select_inpaint_gaussians(remaining: GaussianField, removed: GaussianField, d_thr: float) -> np.ndarray:
    """
    Indices of the remaining Gaussians whose nearest removed center is closer
    than d_thr.

    :param remaining: the field after removal
    :param removed: the removed Gaussians
    :param d_thr: the distance threshold (meters)
    :type d_thr: float
    :return: the sorted indices into remaining
    :rtype: np.ndarray
    """
    if len(removed) == 0:
        raise EmptyInput("No removed Gaussians to inpaint around")
    if len(remaining) == 0:
        return np.zeros(0, dtype=np.int64)
    dist, _ = cKDTree(removed.positions).query(remaining.positions, k=1)
    return np.flatnonzero(dist < d_thr)


def _flat_white(field: GaussianField) -> GaussianField:
    result = field.copy()
    result.sh_coeffs = np.zeros((len(field), NUM_SH_COEFFS, 3))
    result.sh_coeffs[:, 0, :] = rgb_to_sh(np.ones(3))
    result.opacity_logits = np.full(len(field), logit(MASK_OPACITY))
    result.sh_degree_active = 0
    return result


def inpaint_mask(remaining: GaussianField, removed: GaussianField, d_thr: float, cam: Camera,
                 raster: RasterConfig = None) -> np.ndarray:
    """
    Renders the neighborhood of a removed object (the selected remaining
    Gaussians plus the removed footprint) in flat white and thresholds the
    alpha.

    :param remaining: the field after removal
    :param removed: the removed Gaussians
    :param d_thr: the neighborhood distance (meters)
    :param cam: the view to produce the mask for
    :param raster: the rasterization options
    :return: the H x W boolean mask
    :rtype: np.ndarray
    """
    idx = select_inpaint_gaussians(remaining, removed, d_thr)
    parts = [removed] if len(idx) == 0 else [remaining.select(idx), removed]
    region = _flat_white(GaussianField.concat(parts))
    region.background = np.zeros(3)
    if raster is None:
        raster = RasterConfig()
    out = render(region, cam, raster)
    return out.alpha > MASK_ALPHA_THRESHOLD


def asset_extent(frames: Sequence[GaussianField]) -> np.ndarray:
    """
    Extent of the box around the centers of all frames of an asset.
    """
    positions = np.concatenate([f.positions for f in frames], axis=0)
    if len(positions) == 0:
        raise DegenerateAsset("Asset has no Gaussians")
    return np.maximum(positions.max(axis=0) - positions.min(axis=0), MIN_ASSET_EXTENT)


def track_from_waypoints(object_id: str, waypoints: Sequence[Waypoint], extent: np.ndarray,
                         hold_until: Optional[int] = None) -> BBoxTrack:
    """
    Builds a box track through the waypoints. With hold_until after the last
    waypoint, the last pose is held until then.
    """
    check_waypoints(waypoints, error=BadTrajectory)
    entries = [TrackEntry(w.timestep, w.position, w.yaw, 0.0, extent) for w in waypoints]
    last = waypoints[-1]
    if (hold_until is not None) and (hold_until > last.timestep):
        entries.append(TrackEntry(hold_until, last.position, last.yaw, 0.0, extent))
    return BBoxTrack(object_id, entries)


def insert_object(graph: GaussianGraph, asset: Union[GaussianField, Sequence[GaussianField]],
                  waypoints: Sequence[Waypoint], object_id: Optional[str] = None, extent=None,
                  hold_until: Optional[int] = None, source: str = "asset") -> GaussianGraph:
    """
    Adds an asset (canonical, centered in its box) as a new node moving along
    the waypoints. Several frames make a 4D asset indexed by the timestep
    offset from the first waypoint.

    :param graph: the graph (a new graph is returned)
    :type graph: GaussianGraph
    :param asset: the asset frame(s)
    :param waypoints: the trajectory
    :param object_id: the node id, derived from the source if None
    :param extent: the box extent, from the asset bounds if None
    :param hold_until: keep the object at its last pose until this timestep
    :param source: the asset id
    :return: the new graph
    :rtype: GaussianGraph
    """
    frames = list(asset) if isinstance(asset, (list, tuple)) else [asset]
    if len(frames) == 0:
        raise DegenerateAsset("Asset has no frames")
    if extent is None:
        extent = asset_extent(frames)
    if object_id is None:
        k = 0
        while ("%s_%d" % (source, k)) in graph:
            k += 1
        object_id = "%s_%d" % (source, k)
    track = track_from_waypoints(object_id, list(waypoints), np.asarray(extent, dtype=np.float64), hold_until)
    result = GaussianGraph(dict(graph.nodes))
    return add_node(result, object_id, frames, track, source=source)


class InpaintClient(Protocol):
    """
    Repairs the masked region of an image.
    """

    def inpaint(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        ...


class NullInpaintClient:
    """
    Returns the image unchanged, so that pipelines run without a service.
    """

    def inpaint(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.array(image, copy=True)


@dataclass
class InpaintPair:
    view_id: str
    image: np.ndarray
    mask: np.ndarray


def export_inpaint_pairs(directory: str, pairs: Sequence[InpaintPair]) -> List[str]:
    """
    Writes <view_id>_image.png and <view_id>_mask.png for every pair.

    :param directory: the output directory, created if necessary
    :param pairs: the pairs
    :return: the written files
    :rtype: list
    """
    os.makedirs(directory, exist_ok=True)
    result = []
    for pair in pairs:
        image_path = os.path.join(directory, pair.view_id + "_image.png")
        mask_path = os.path.join(directory, pair.view_id + "_mask.png")
        write_image(image_path, pair.image)
        write_mask(mask_path, pair.mask)
        result.extend([image_path, mask_path])
    logger().info("Exported %d inpainting pairs to %s" % (len(pairs), directory))
    return result


def load_inpainted(directory: str) -> Dict[str, np.ndarray]:
    """
    Reads the repaired images <view_id>_inpainted.png from a directory.

    :param directory: the directory
    :return: the images by view id
    :rtype: dict
    """
    if not os.path.isdir(directory):
        raise IOError("Inpainting directory does not exist: %s" % directory)
    result = dict()
    for name in sorted(os.listdir(directory)):
        m = re.match(r"^(.+)_inpainted\.png$", name)
        if m is not None:
            result[m.group(1)] = read_image(os.path.join(directory, name))
    return result
