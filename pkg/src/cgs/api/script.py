"""
Edit scripts: a JSON list of texture, weather, removal and insertion
operations that is applied in order to a scene bundle.

Example::

    {
      "version": 1,
      "operations": [
        {"type": "texture", "view_id": "front_t003", "edited_image": "edit.png", "mask": "mask.png"},
        {"type": "weather", "kind": "snow", "count": 2000, "seed": 1,
         "trajectory": {"name": "constant_fall", "params": {"v": [0, -0.05, 0]}},
         "snow_coverage": true, "dedup_threshold": 0.1},
        {"type": "remove", "object_id": "vehicle_0"},
        {"type": "insert", "asset_id": "sedan",
         "initial_pose": {"position": [2, 0.7, 2.5], "yaw": 0.0, "timestep": 0},
         "trajectory": {"llm": {"description": "straight 5 m/s over 8 steps"}}}
      ]
    }
"""
import json
import logging
import os

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from cgs.api.bank import AssetBank
from cgs.api.core import DataError, EmptyInput, ParseError, dataclass_from_dict
from cgs.api.gaussians import Camera, GaussianField
from cgs.api.graph import node_to_world
from cgs.api.objects import InpaintClient, InpaintPair, NullInpaintClient, inpaint_mask, insert_object, \
    remove_from_scene, remove_object
from cgs.api.pipeline import render_view, scene_at
from cgs.api.rasterizer import RasterConfig, render
from cgs.api.sceneio import SceneBundle, read_image, read_mask, view_id
from cgs.api.texture import backproject_texture, equalize_depth
from cgs.api.trajectory import TrajectoryRequest, predict_trajectory, waypoints_from_list
from cgs.api.weather import KINDS, WeatherTrajectory, snow_cover_field, snow_coverage, spawn_weather


SCRIPT_VERSION = 1

OP_TEXTURE = "texture"
OP_WEATHER = "weather"
OP_REMOVE = "remove"
OP_INSERT = "insert"
OPERATIONS = [OP_TEXTURE, OP_WEATHER, OP_REMOVE, OP_INSERT]


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.script")
    return _logger


@dataclass
class EditConfig:
    """
    Options of the editing operations.
    """
    up_threshold: float = 0.8
    dedup_threshold: float = 0.1
    snow_size: float = 0.05
    inpaint_distance: float = 1.0
    texture_stride: int = 1
    weather_height: float = 5.0
    min_alpha: float = 0.5
    sky_direction: Sequence[float] = (0.0, 1.0, 0.0)

    def validate(self):
        if not (-1.0 <= self.up_threshold <= 1.0):
            raise ParseError("editing: up_threshold must lie in [-1,1]: %g" % self.up_threshold)
        for name in ["dedup_threshold", "inpaint_distance"]:
            if getattr(self, name) < 0:
                raise ParseError("editing: %s must not be negative" % name)
        for name in ["snow_size", "weather_height"]:
            if getattr(self, name) <= 0:
                raise ParseError("editing: %s must be positive" % name)
        if self.texture_stride < 1:
            raise ParseError("editing: texture_stride must be at least 1")
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "EditConfig":
        return dataclass_from_dict(cls, d, section="editing")


@dataclass
class TextureEdit:
    view_id: str
    edited_image: str
    mask: str
    stride: Optional[int] = None


@dataclass
class WeatherEdit:
    kind: str
    count: int
    seed: int = 0
    trajectory: Optional[WeatherTrajectory] = None
    bounds: Optional[List[List[float]]] = None
    snow_coverage: bool = False
    dedup_threshold: Optional[float] = None
    up_threshold: Optional[float] = None
    coverage_timesteps: Optional[List[int]] = None


@dataclass
class RemoveObject:
    object_id: Optional[str] = None
    bbox: Optional[List[List[float]]] = None


@dataclass
class InsertObject:
    asset_id: str
    position: np.ndarray
    yaw: float = 0.0
    timestep: int = 0
    waypoints: Optional[List[Dict]] = None
    description: Optional[str] = None
    object_id: Optional[str] = None
    hold_until: Optional[int] = None


EditOperation = Union[TextureEdit, WeatherEdit, RemoveObject, InsertObject]


@dataclass
class EditScript:
    operations: List[EditOperation] = field(default_factory=list)
    version: int = SCRIPT_VERSION


def _resolve(base_dir: Optional[str], path: str) -> str:
    if (base_dir is None) or os.path.isabs(path):
        return path
    return os.path.join(base_dir, path)


def parse_operation(d: Dict, base_dir: Optional[str] = None) -> EditOperation:
    """
    Turns one JSON operation into its dataclass. Relative paths are
    resolved against base_dir.
    """
    if not isinstance(d, dict) or ("type" not in d):
        raise ParseError("Edit operation without type: %s" % str(d))
    kind = d["type"]
    try:
        if kind == OP_TEXTURE:
            return TextureEdit(str(d["view_id"]), _resolve(base_dir, d["edited_image"]), _resolve(base_dir, d["mask"]),
                               d.get("stride"))
        if kind == OP_WEATHER:
            if d["kind"] not in KINDS:
                raise ParseError("Unknown weather kind '%s', available: %s" % (d["kind"], ", ".join(KINDS)))
            if int(d["count"]) <= 0:
                raise ParseError("Weather count must be positive: %s" % str(d["count"]))
            traj = None if d.get("trajectory") is None else WeatherTrajectory.from_dict(d["trajectory"])
            return WeatherEdit(d["kind"], int(d["count"]), int(d.get("seed", 0)), traj, d.get("bounds"),
                               bool(d.get("snow_coverage", False)), d.get("dedup_threshold"), d.get("up_threshold"),
                               d.get("coverage_timesteps"))
        if kind == OP_REMOVE:
            if (d.get("object_id") is None) == (d.get("bbox") is None):
                raise ParseError("Remove needs exactly one of object_id and bbox: %s" % str(d))
            return RemoveObject(d.get("object_id"), d.get("bbox"))
        if kind == OP_INSERT:
            pose = d["initial_pose"]
            traj = d.get("trajectory") or dict()
            waypoints = traj.get("waypoints")
            description = traj.get("llm", {}).get("description") if "llm" in traj else None
            return InsertObject(str(d["asset_id"]), np.asarray(pose["position"], dtype=np.float64).reshape(3),
                                float(pose.get("yaw", 0.0)), int(pose.get("timestep", 0)), waypoints, description,
                                d.get("object_id"), d.get("hold_until"))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ParseError("Malformed %s operation %s: %s" % (kind, str(d), str(e)))
    raise ParseError("Unknown edit operation '%s', available: %s" % (kind, ", ".join(OPERATIONS)))


def parse_script(d: Dict, base_dir: Optional[str] = None) -> EditScript:
    if not isinstance(d, dict) or not isinstance(d.get("operations"), list):
        raise ParseError("Edit script needs an 'operations' list")
    version = int(d.get("version", SCRIPT_VERSION))
    if version != SCRIPT_VERSION:
        raise ParseError("Unsupported edit script version: %d" % version)
    return EditScript([parse_operation(op, base_dir) for op in d["operations"]], version)


def load_script(path: str) -> EditScript:
    """
    Loads an edit script from JSON.

    :param path: the script file
    :type path: str
    :return: the script
    :rtype: EditScript
    """
    if not os.path.exists(path):
        raise IOError("Edit script does not exist: %s" % path)
    with open(path, "r") as fp:
        try:
            data = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    return parse_script(data, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class EditResult:
    bundle: SceneBundle
    pairs: List[InpaintPair] = field(default_factory=list)
    inpainted: Dict[str, np.ndarray] = field(default_factory=dict)


def _camera(bundle: SceneBundle, name: str) -> Camera:
    for cam in bundle.rig:
        if view_id(cam) == name:
            return cam
    raise DataError("Unknown view: %s" % name)


def _scene_depth(bundle: SceneBundle, cam: Camera, cfg: EditConfig, raster: RasterConfig, r_ref: float) -> np.ndarray:
    out = render_view(bundle, cam, raster, r_ref, weather=False)
    return np.where(out.alpha >= cfg.min_alpha, out.depth, 0.0)


def apply_texture(bundle: SceneBundle, op: TextureEdit, cfg: EditConfig, raster: RasterConfig, r_ref: float) -> Dict:
    cam = _camera(bundle, op.view_id)
    edited = read_image(op.edited_image)
    mask = read_mask(op.mask)
    depth = _scene_depth(bundle, cam, cfg, raster, r_ref)
    patch = backproject_texture(edited, mask, equalize_depth(depth, mask), cam,
                                stride=op.stride or cfg.texture_stride)
    bundle.static = GaussianField.concat([bundle.static, patch])
    return {"type": OP_TEXTURE, "view_id": op.view_id, "gaussians": len(patch)}


def _default_bounds(bundle: SceneBundle, height: float):
    lo, hi = bundle.static.bounds()
    hi = hi.copy()
    hi[1] = max(hi[1], lo[1]) + height
    return lo, np.maximum(hi, lo + 1e-3)


def apply_weather(bundle: SceneBundle, op: WeatherEdit, cfg: EditConfig, raster: RasterConfig, r_ref: float) -> Dict:
    bounds = op.bounds if op.bounds is not None else _default_bounds(bundle, cfg.weather_height)
    layer = spawn_weather(op.kind, bounds, op.count, op.seed, trajectory=op.trajectory)
    bundle.weather.append(layer)
    entry = {"type": OP_WEATHER, "kind": op.kind, "count": op.count, "seed": op.seed}
    if op.snow_coverage:
        cams = [c for c in bundle.rig if (op.coverage_timesteps is None) or (c.timestep in op.coverage_timesteps)]
        if len(cams) == 0:
            raise EmptyInput("No views for snow coverage")
        frames = [(_scene_depth(bundle, cam, cfg, raster, r_ref), cam) for cam in cams]
        up_threshold = cfg.up_threshold if op.up_threshold is None else op.up_threshold
        dedup = cfg.dedup_threshold if op.dedup_threshold is None else op.dedup_threshold
        points = snow_coverage(frames, up_threshold, dedup, up=cfg.sky_direction)
        cover = snow_cover_field(points, cfg.snow_size, seed=op.seed)
        bundle.static = GaussianField.concat([bundle.static, cover])
        entry["snow_cover"] = len(cover)
    return entry


def apply_remove(bundle: SceneBundle, op: RemoveObject, cfg: EditConfig, raster: RasterConfig, r_ref: float,
                 inpaint_client: InpaintClient, result: EditResult) -> Dict:
    target = op.object_id if op.object_id is not None else (op.bbox[0], op.bbox[1])
    old_static, old_graph = bundle.static, bundle.graph
    bundle.static, bundle.graph, _ = remove_from_scene(old_static, old_graph, target)
    if isinstance(target, str) and not np.any(old_static.provenance == target):
        removed_static = GaussianField.empty()
    else:
        _, removed_static = remove_object(old_static, target)

    n_pairs = 0
    for cam in bundle.rig:
        removed = removed_static
        if isinstance(target, str) and (target in old_graph) and old_graph.nodes[target].track.alive(cam.timestep):
            removed = GaussianField.concat([removed_static, node_to_world(old_graph.nodes[target], cam.timestep)])
        if len(removed) == 0:
            continue
        remaining = scene_at(bundle, cam.timestep, cam, r_ref, weather=False)
        mask = inpaint_mask(remaining, removed, cfg.inpaint_distance, cam, raster)
        if not np.any(mask):
            continue
        image = render(remaining, cam, raster).color
        name = view_id(cam)
        result.pairs.append(InpaintPair(name, image, mask))
        result.inpainted[name] = inpaint_client.inpaint(image, mask)
        n_pairs += 1
    entry = {"type": OP_REMOVE, "inpaint_pairs": n_pairs}
    if op.object_id is not None:
        entry["object_id"] = op.object_id
    else:
        entry["bbox"] = [[float(x) for x in op.bbox[0]], [float(x) for x in op.bbox[1]]]
    return entry


def apply_insert(bundle: SceneBundle, op: InsertObject, cfg: EditConfig, bank: AssetBank, client) -> Dict:
    asset = bank.load(op.asset_id)
    if op.waypoints is not None:
        waypoints = waypoints_from_list(op.waypoints)
    else:
        request = TrajectoryRequest(op.position, op.yaw, np.asarray(cfg.sky_direction, dtype=np.float64),
                                    op.description or "", op.timestep)
        waypoints = predict_trajectory(request, client).waypoints
    before = set(bundle.graph.nodes.keys())
    bundle.graph = insert_object(bundle.graph, asset.frames, waypoints, object_id=op.object_id, extent=asset.extent,
                                 hold_until=op.hold_until, source=op.asset_id)
    new_id = sorted(set(bundle.graph.nodes.keys()) - before)[0]
    return {"type": OP_INSERT, "asset_id": op.asset_id, "object_id": new_id,
            "waypoints": [w.to_dict() for w in waypoints]}


def apply_script(bundle: SceneBundle, script: EditScript, bank: AssetBank = None, client=None,
                 inpaint_client: InpaintClient = None, cfg: EditConfig = None,
                 raster: RasterConfig = None, reference_distance: float = 20.0) -> EditResult:
    """
    Applies the operations in order to a copy of the bundle and appends one
    history entry per operation.

    :param bundle: the scene to edit (left unchanged)
    :type bundle: SceneBundle
    :param script: the operations
    :type script: EditScript
    :param bank: the asset bank for insertions
    :param client: the trajectory client, the offline fallback if None
    :param inpaint_client: repairs removal holes, pass-through if None
    :param cfg: the editing options
    :param raster: the rasterization options
    :param reference_distance: r_ref of the node opacity falloff
    :return: the edited bundle and the inpainting pairs
    :rtype: EditResult
    """
    if cfg is None:
        cfg = EditConfig()
    if raster is None:
        raster = RasterConfig()
    if inpaint_client is None:
        inpaint_client = NullInpaintClient()
    result = EditResult(bundle.copy())
    for i, op in enumerate(script.operations):
        logger().info("Edit %d/%d: %s" % (i + 1, len(script.operations), type(op).__name__))
        if isinstance(op, TextureEdit):
            entry = apply_texture(result.bundle, op, cfg, raster, reference_distance)
        elif isinstance(op, WeatherEdit):
            entry = apply_weather(result.bundle, op, cfg, raster, reference_distance)
        elif isinstance(op, RemoveObject):
            entry = apply_remove(result.bundle, op, cfg, raster, reference_distance, inpaint_client, result)
        else:
            if bank is None:
                bank = AssetBank()
            entry = apply_insert(result.bundle, op, cfg, bank, client)
        result.bundle.history.append(entry)
    return result
