"""
Dynamic Gaussian graph: per-object Gaussians in a canonical box frame,
bounding-box tracks over time and composition with the static field.
"""
import json
import logging
import os

from dataclasses import dataclass, field as dc_field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from scipy.spatial.transform import Rotation, Slerp

from cgs.api.core import BadTrajectory, DataError, DuplicateObjectId, OutsideLifespan, ParseError, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField, matrix_to_quaternion, quaternion_multiply, project_points
from cgs.api.lidar import PointCloud, downsample, init_field, init_random_field
from cgs.api.optimizer import TrainConfig, train
from cgs.api.rasterizer import FIELD_PARAMS, RasterConfig, field_tensors
from cgs.api.sh import rotate_sh, sh_rotation_matrix


BOX_SLACK = 0.1
""" relative slack of the canonical box around node Gaussians """


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.graph")
    return _logger


@dataclass
class GraphConfig:
    """
    Options for dynamic nodes.
    """
    reference_distance: float = 20.0
    node_iterations: int = 1000
    node_init_points: int = 3000
    joint_training: bool = False
    joint_iterations: int = 500
    mask_margin: int = 2

    def validate(self):
        if self.reference_distance <= 0:
            raise ParseError("reference_distance must be positive: %g" % self.reference_distance)
        if self.node_init_points < 1:
            raise ParseError("node_init_points must be at least 1")
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "GraphConfig":
        return dataclass_from_dict(cls, d, section="graph")


def box_rotation(yaw: float, pitch: float) -> np.ndarray:
    """
    Rotation of a box: yaw about the world up axis (+y), then pitch about the
    box's local z axis. Yaw 0 heads along +x.
    """
    return Rotation.from_euler("YZ", [yaw, pitch]).as_matrix()


@dataclass
class TrackEntry:
    timestep: int
    center: np.ndarray
    yaw: float
    pitch: float
    extent: np.ndarray

    def __post_init__(self):
        self.timestep = int(self.timestep)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        self.pitch = float(self.pitch)


class BBoxTrack:
    """
    The annotated boxes of one object. Poses between annotated timesteps
    are interpolated (linear centers, spherical rotations), never
    extrapolated.
    """

    def __init__(self, object_id: str, entries: Sequence[TrackEntry]):
        self.object_id = str(object_id)
        self.entries = list(entries)
        self.validate()
        self._times = np.array([e.timestep for e in self.entries], dtype=np.float64)
        self._centers = np.stack([e.center for e in self.entries])
        self._extents = np.stack([e.extent for e in self.entries])
        rots = Rotation.from_matrix(np.stack([box_rotation(e.yaw, e.pitch) for e in self.entries]))
        self._rotations = rots
        self._slerp = Slerp(self._times, rots) if len(self.entries) > 1 else None

    def validate(self):
        if len(self.entries) == 0:
            raise BadTrajectory("Track %s has no entries" % self.object_id)
        times = [e.timestep for e in self.entries]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise BadTrajectory("Track %s: timesteps must be strictly increasing" % self.object_id)
        for e in self.entries:
            if np.any(e.extent <= 0):
                raise DataError("Track %s: extents must be positive" % self.object_id)
            if not (np.all(np.isfinite(e.center)) and np.isfinite(e.yaw) and np.isfinite(e.pitch)):
                raise BadTrajectory("Track %s: non-finite pose" % self.object_id)

    @property
    def t0(self) -> int:
        return self.entries[0].timestep

    @property
    def t1(self) -> int:
        return self.entries[-1].timestep

    def alive(self, t) -> bool:
        return self.t0 <= t <= self.t1

    def _check(self, t):
        if not self.alive(t):
            raise OutsideLifespan("Object %s does not exist at t=%s (lifespan %d..%d)" % (self.object_id, str(t), self.t0, self.t1))

    def pose(self, t) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns (rotation 3x3, center) of the box at t.
        """
        self._check(t)
        if self._slerp is None:
            return self._rotations.as_matrix()[0], self._centers[0].copy()
        center = np.stack([np.interp(t, self._times, self._centers[:, i]) for i in range(3)])
        rot = self._slerp([float(t)]).as_matrix()[0]
        return rot, center

    def extent_at(self, t) -> np.ndarray:
        self._check(t)
        return np.stack([np.interp(t, self._times, self._extents[:, i]) for i in range(3)])

    def object_to_world(self, t) -> np.ndarray:
        rot, center = self.pose(t)
        result = np.eye(4)
        result[:3, :3] = rot
        result[:3, 3] = center
        return result

    def canonicalize(self, points: np.ndarray, t) -> np.ndarray:
        """
        Maps world points into the box frame at t.
        """
        rot, center = self.pose(t)
        return (np.asarray(points, dtype=np.float64) - center) @ rot

    def to_list(self) -> List[Dict]:
        return [{
            "object_id": self.object_id,
            "timestep": e.timestep,
            "center": [float(x) for x in e.center],
            "yaw": e.yaw,
            "pitch": e.pitch,
            "extent": [float(x) for x in e.extent],
        } for e in self.entries]

    @classmethod
    def static(cls, object_id: str, center, yaw: float, extent, t0: int, t1: Optional[int] = None) -> "BBoxTrack":
        entries = [TrackEntry(t0, center, yaw, 0.0, extent)]
        if (t1 is not None) and (t1 > t0):
            entries.append(TrackEntry(t1, center, yaw, 0.0, extent))
        return cls(object_id, entries)


def tracks_from_list(items: Sequence[Dict]) -> Dict[str, BBoxTrack]:
    """
    Groups annotation records {object_id, timestep, center, yaw, pitch, extent}
    into tracks.
    """
    grouped = dict()
    for item in items:
        try:
            entry = TrackEntry(item["timestep"], item["center"], item.get("yaw", 0.0), item.get("pitch", 0.0),
                               item["extent"])
            grouped.setdefault(str(item["object_id"]), []).append(entry)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError("Malformed track record %s: %s" % (str(item), str(e)))
    return {k: BBoxTrack(k, sorted(v, key=lambda e: e.timestep)) for k, v in sorted(grouped.items())}


def load_tracks(path: str) -> Dict[str, BBoxTrack]:
    """
    Loads box annotations from a JSON file containing a list of records.

    :param path: the JSON file
    :type path: str
    :return: the tracks by object id
    :rtype: dict
    """
    if not os.path.exists(path):
        raise IOError("Track file does not exist: %s" % path)
    with open(path, "r") as fp:
        try:
            items = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    return tracks_from_list(items)


def tracks_to_json(tracks: Dict[str, BBoxTrack]) -> List[Dict]:
    result = []
    for object_id in sorted(tracks.keys()):
        result.extend(tracks[object_id].to_list())
    return result


@dataclass
class DynamicNode:
    """
    One object: Gaussians in the canonical box frame (several frames for
    per-timestep assets) and its track.
    """
    object_id: str
    frames: List[GaussianField]
    track: BBoxTrack
    source: str = "trained"

    @property
    def gaussians(self) -> GaussianField:
        return self.frames[0]

    def field_at(self, t) -> GaussianField:
        return self.frames[int(t - self.track.t0) % len(self.frames)]

    def world_to_object(self, t) -> np.ndarray:
        return np.linalg.inv(self.track.object_to_world(t))


@dataclass
class GaussianGraph:
    nodes: Dict[str, DynamicNode] = dc_field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, object_id) -> bool:
        return object_id in self.nodes

    def ordered(self) -> List[DynamicNode]:
        return [self.nodes[k] for k in sorted(self.nodes.keys())]


def fit_canonical(object_id: str, field: GaussianField, extent: np.ndarray) -> GaussianField:
    """
    Clips Gaussian centers into the canonical box (plus slack). Centers that
    already lie inside are left bit-identical.

    :param object_id: the object, for logging
    :type object_id: str
    :param field: the canonical Gaussians
    :type field: GaussianField
    :param extent: the box extent
    :return: the field, a clipped copy if any center was outside
    :rtype: GaussianField
    """
    if len(field) == 0:
        return field
    limit = 0.5 * np.asarray(extent, dtype=np.float64) * (1.0 + BOX_SLACK)
    outside = np.any(np.abs(field.positions) > limit, axis=1)
    if not np.any(outside):
        return field
    logger().warning("Object %s: clipping %d of %d Gaussians into the box" % (object_id, int(outside.sum()), len(field)))
    result = field.copy()
    result.positions[outside] = np.clip(field.positions[outside], -limit, limit)
    return result


def add_node(graph: GaussianGraph, object_id: str, gaussians, track: BBoxTrack, source: str = "trained") -> GaussianGraph:
    """
    Adds a node. The Gaussians are given in the box frame at the track's
    first timestep; a list of fields makes a per-timestep (4D) node. Centers
    outside the box plus BOX_SLACK are clipped onto its faces.

    :param graph: the graph to add to (modified in place)
    :type graph: GaussianGraph
    :param object_id: the unique id
    :type object_id: str
    :param gaussians: a GaussianField or a list of them
    :param track: the box track
    :type track: BBoxTrack
    :param source: where the Gaussians came from (trained, asset id)
    :return: the graph
    :rtype: GaussianGraph
    """
    if object_id in graph.nodes:
        raise DuplicateObjectId("Object already in graph: %s" % object_id)
    frames = list(gaussians) if isinstance(gaussians, (list, tuple)) else [gaussians]
    extent = track.extent_at(track.t0)
    frames = [fit_canonical(object_id, f, extent).copy() for f in frames]
    for f in frames:
        f.provenance[:] = object_id
    graph.nodes[object_id] = DynamicNode(object_id, frames, track, source=source)
    logger().info("Added node %s with %d Gaussians, lifespan %d..%d" % (
        object_id, len(frames[0]), track.t0, track.t1))
    return graph


def transform_field(field: GaussianField, rotation: np.ndarray, center: np.ndarray) -> GaussianField:
    """
    Applies the rigid map p -> R p + c to a field: positions, quaternions,
    SH coefficients and the cached world covariances R Sigma R^T.
    """
    result = field.copy()
    result.positions = field.positions @ rotation.T + center
    q = matrix_to_quaternion(rotation)
    result.rotations = quaternion_multiply(q[None, :], field.rotations)
    result.sh_coeffs = rotate_sh(field.sh_coeffs, rotation)
    result.covariances = np.einsum("ij,njk,lk->nil", rotation, field.world_covariances(), rotation)
    return result


def node_to_world(node: DynamicNode, t) -> GaussianField:
    """
    The node's Gaussians in world coordinates at t.

    :param node: the node
    :type node: DynamicNode
    :param t: the timestep (may be fractional)
    :return: the world-frame Gaussians with provenance set to the object id
    :rtype: GaussianField
    """
    rot, center = node.track.pose(t)
    result = transform_field(node.field_at(t), rot, center)
    result.provenance[:] = node.object_id
    return result


def occlusion_opacity(node: DynamicNode, cam: Camera, t, reference_distance: float = 20.0) -> float:
    """
    Distance-dependent opacity multiplier min(1, (r_ref / |b_o(t) - rho|)^2).

    :param node: the node
    :param cam: the viewing camera
    :param t: the timestep
    :param reference_distance: r_ref (meters)
    :return: the multiplier in (0, 1]
    :rtype: float
    """
    _, center = node.track.pose(t)
    dist = float(np.linalg.norm(center - cam.center))
    if dist <= reference_distance:
        return 1.0
    return (reference_distance / dist) ** 2


def compose(static: GaussianField, graph: GaussianGraph, t, cam: Optional[Camera] = None,
            reference_distance: float = 20.0, exclude: Sequence[str] = ()) -> GaussianField:
    """
    The static field plus the world-frame Gaussians of every node alive at t,
    with the occlusion multiplier applied when a camera is given.

    :param static: the static field
    :type static: GaussianField
    :param graph: the dynamic graph
    :type graph: GaussianGraph
    :param t: the timestep
    :param cam: the viewing camera, no distance attenuation if None
    :param reference_distance: r_ref of the occlusion multiplier
    :param exclude: object ids to leave out
    :return: the composite field
    :rtype: GaussianField
    """
    parts = []
    for node in graph.ordered():
        if (node.object_id in exclude) or not node.track.alive(t):
            continue
        world = node_to_world(node, t)
        if cam is not None:
            world = world.with_opacity_multiplier(occlusion_opacity(node, cam, t, reference_distance))
        parts.append(world)
    if len(parts) == 0:
        return static.copy()
    result = GaussianField.concat([static] + parts)
    result.sh_degree_active = static.sh_degree_active
    return result


def box_mask(track: BBoxTrack, cam: Camera, t, margin: int = 2) -> np.ndarray:
    """
    Image-space rectangle covering the projected box at t, False elsewhere
    or if the object is not alive or not in front of the camera.

    :return: the H x W boolean mask
    :rtype: np.ndarray
    """
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if not track.alive(t):
        return mask
    rot, center = track.pose(t)
    half = 0.5 * track.extent_at(t)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    corners = (signs * half) @ rot.T + center
    pix, _, valid = project_points(corners, cam)
    if not np.any(valid):
        return mask
    pix = pix[valid]
    x0 = int(max(0, np.floor(pix[:, 0].min()) - margin))
    x1 = int(min(cam.width - 1, np.ceil(pix[:, 0].max()) + margin))
    y0 = int(max(0, np.floor(pix[:, 1].min()) - margin))
    y1 = int(min(cam.height - 1, np.ceil(pix[:, 1].max()) + margin))
    if (x0 <= x1) and (y0 <= y1):
        mask[y0:y1 + 1, x0:x1 + 1] = True
    return mask


def _quaternion_multiply_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def node_world_fn(node: DynamicNode, static: GaussianField, graph: GaussianGraph, reference_distance: float = 20.0):
    """
    Returns the function that maps the node's trainable (canonical) tensors
    to the world-space tensors rendered for a camera: the fixed static field
    and other nodes, followed by the rigidly transformed node. Views where
    the node is absent return None.
    """

    def fn(params: Dict[str, torch.Tensor], cam: Camera) -> Optional[Dict[str, torch.Tensor]]:
        t = cam.timestep
        if not node.track.alive(t):
            return None
        context = compose(static, graph, t, cam=cam, reference_distance=reference_distance, exclude=[node.object_id])
        const = field_tensors(context)
        rot, center = node.track.pose(t)
        r = torch.as_tensor(rot)
        q = torch.as_tensor(matrix_to_quaternion(rot))
        d = torch.as_tensor(sh_rotation_matrix(rot))
        moved = {
            "positions": params["positions"] @ r.T + torch.as_tensor(center),
            "log_scales": params["log_scales"],
            "rotations": _quaternion_multiply_torch(q.expand_as(params["rotations"]), params["rotations"]),
            "sh_coeffs": torch.einsum("ij,njc->nic", d, params["sh_coeffs"]),
            "opacity_logits": params["opacity_logits"],
        }
        m = occlusion_opacity(node, cam, t, reference_distance)
        if m < 1.0:
            moved["opacity_logits"] = torch.logit(torch.sigmoid(params["opacity_logits"]) * m)
        return {name: torch.cat([const[name], moved[name]], dim=0) for name in FIELD_PARAMS}

    return fn


def init_node_field(points: PointCloud, extent: np.ndarray, count: int = 3000, seed: int = 0,
                    opacity: float = 0.1) -> GaussianField:
    """
    Initial canonical Gaussians of a node: its LiDAR points (downsampled to
    count) or, with fewer than four points, count random points in the box.
    """
    if len(points) >= 4:
        return init_field(downsample(points, count, seed=seed), opacity=opacity)
    half = 0.5 * np.asarray(extent, dtype=np.float64)
    return init_random_field(count, (-half, half), seed=seed, opacity=opacity)


def train_nodes(static: GaussianField, graph: GaussianGraph, frames: Sequence[Tuple[np.ndarray, Camera]],
                cfg: TrainConfig = None, gcfg: GraphConfig = None, raster: RasterConfig = None,
                priors: Optional[Dict[str, PointCloud]] = None) -> GaussianGraph:
    """
    Optimizes every node separately with the static field held fixed, using
    the frames in which the node is alive. Nodes are processed in id order
    and each sees the already trained ones.

    :param static: the trained static field
    :param graph: the graph with initialized nodes
    :param frames: the (image, camera) pairs
    :param cfg: the training options (densification is disabled for nodes)
    :param gcfg: the graph options
    :param raster: the rasterization options
    :param priors: canonical point priors per object id
    :return: a new graph with trained nodes
    :rtype: GaussianGraph
    """
    if cfg is None:
        cfg = TrainConfig()
    if gcfg is None:
        gcfg = GraphConfig()
    if priors is None:
        priors = dict()
    result = GaussianGraph(dict(graph.nodes))
    for node in graph.ordered():
        views = [(img, cam, 1.0) for img, cam in frames if node.track.alive(cam.timestep)]
        if len(views) == 0:
            logger().warning("Object %s is not visible in any frame, not trained" % node.object_id)
            continue
        node_cfg = replace(cfg, total_iterations=gcfg.node_iterations, densify=False, freeze_iterations=0)
        fn = node_world_fn(node, static, result, gcfg.reference_distance)
        logger().info("Training node %s on %d views" % (node.object_id, len(views)))
        # composites are rendered over the static background
        start = node.gaussians.copy()
        start.background = static.background.copy()
        trained = train(start, views, priors.get(node.object_id), node_cfg, raster=raster,
                        world_fn=fn, dynamic=True, extent=1.0)
        field = fit_canonical(node.object_id, trained.field, node.track.extent_at(node.track.t0))
        field.provenance[:] = node.object_id
        result.nodes[node.object_id] = DynamicNode(node.object_id, [field] + node.frames[1:], node.track, node.source)
    return result


def static_world_fn(graph: GaussianGraph, reference_distance: float = 20.0):
    """
    World function for joint refinement of the static field: the trainable
    static tensors followed by the frozen nodes composed at the camera's timestep.
    """

    def fn(params: Dict[str, torch.Tensor], cam: Camera) -> Dict[str, torch.Tensor]:
        empty = GaussianField.empty()
        context = compose(empty, graph, cam.timestep, cam=cam, reference_distance=reference_distance)
        if len(context) == 0:
            return params
        const = field_tensors(context)
        return {name: torch.cat([params[name], const[name]], dim=0) for name in FIELD_PARAMS}

    return fn
