"""
End-to-end drivers: reconstruction of a scene manifest into a scene bundle,
rendering of bundles and evaluation against ground truth.
"""
import json
import logging
import os

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cgs.api.core import ParseError, VersionMismatch
from cgs.api.gaussians import Camera, GaussianField
from cgs.api.graph import BBoxTrack, GaussianGraph, GraphConfig, add_node, box_mask, compose, init_node_field, \
    load_tracks, static_world_fn, train_nodes
from cgs.api.incremental import (INIT_LIDAR, Bin, IncrementalConfig, bins_from_depth_range, partition_bins,
                                 train_incremental)
from cgs.api.lidar import LidarConfig, PointCloud, build_prior, colorize, read_point_cloud, split_by_tracks
from cgs.api.metrics import MetricsReport, evaluate_dirs
from cgs.api.optimizer import LossRecord, TrainConfig, train
from cgs.api.rasterizer import RasterConfig, RenderOutput, render
from cgs.api.sceneio import SceneBundle, read_camera_rig, read_frames, view_id, write_depth, write_image
from cgs.api.weather import weather_at


SCENE_VERSION = 1

SCENE_KEYS = ["version", "rig", "images", "lidar", "tracks", "holdout", "background", "gt", "seed"]


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.pipeline")
    return _logger


@dataclass
class SceneInput:
    """
    The inputs of a reconstruction, as referenced by a scene manifest.
    """
    cameras: List[Camera]
    frames: List[Tuple[np.ndarray, Camera]]
    holdout: List[Tuple[np.ndarray, Camera]]
    cloud: PointCloud
    tracks: Dict[str, BBoxTrack] = dc_field(default_factory=dict)
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))


def load_scene_input(path: str) -> SceneInput:
    """
    Loads a scene manifest (JSON) and everything it references: camera rig,
    images named <camera_id>_t<ttt>.png, LiDAR points with timesteps and,
    optionally, box tracks and the list of held-out views.

    :param path: the manifest
    :type path: str
    :return: the inputs
    :rtype: SceneInput
    """
    if not os.path.exists(path):
        raise IOError("Scene manifest does not exist: %s" % path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r") as fp:
        try:
            manifest = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    if manifest.get("version", SCENE_VERSION) != SCENE_VERSION:
        raise VersionMismatch("Scene manifest version %s, expected %d" % (str(manifest.get("version")), SCENE_VERSION))
    for key in sorted(set(manifest.keys()) - set(SCENE_KEYS)):
        logger().warning("Ignoring unknown key in %s: %s" % (path, key))
    for key in ["rig", "images", "lidar"]:
        if key not in manifest:
            raise ParseError("Scene manifest %s lacks '%s'" % (path, key))

    cameras = read_camera_rig(os.path.join(base, manifest["rig"]))
    holdout_ids = set(manifest.get("holdout", []))
    all_frames = read_frames(os.path.join(base, manifest["images"]), cameras)
    frames = [f for f in all_frames if view_id(f[1]) not in holdout_ids]
    holdout = [f for f in all_frames if view_id(f[1]) in holdout_ids]
    cloud = read_point_cloud(os.path.join(base, manifest["lidar"]))
    tracks = dict()
    if manifest.get("tracks") is not None:
        tracks = load_tracks(os.path.join(base, manifest["tracks"]))
    background = np.asarray(manifest.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    logger().info("Scene %s: %d cameras, %d training / %d held-out views, %d points, %d tracks" % (
        path, len(cameras), len(frames), len(holdout), len(cloud), len(tracks)))
    return SceneInput(cameras, frames, holdout, cloud, tracks, background)


def ignore_masks(frames: Sequence[Tuple[np.ndarray, Camera]], tracks: Dict[str, BBoxTrack],
                 margin: int = 2) -> Dict[Tuple[str, int], np.ndarray]:
    """
    Per view, the pixels covered by any projected object box. The static
    field is not supervised there.
    """
    result = dict()
    for _, cam in frames:
        mask = np.zeros((cam.height, cam.width), dtype=bool)
        for track in tracks.values():
            mask |= box_mask(track, cam, cam.timestep, margin)
        if np.any(mask):
            result[(cam.camera_id, int(cam.timestep))] = mask
    return result


def reconstruct(scene: SceneInput, cfg: TrainConfig = None, raster: RasterConfig = None, lidar: LidarConfig = None,
                inc: IncrementalConfig = None, gcfg: GraphConfig = None, init: str = INIT_LIDAR,
                dynamic: bool = True, single_bin: bool = False,
                on_bin: Optional[Callable[[Bin, GaussianField], None]] = None) -> Tuple[SceneBundle, List[LossRecord]]:
    """
    Builds the point prior, trains the static field bin by bin, then trains
    one node per tracked object with the static field fixed.

    :param scene: the inputs
    :type scene: SceneInput
    :param cfg: the training options
    :param raster: the rasterization options
    :param lidar: the point prior options
    :param inc: the binning options
    :param gcfg: the graph options
    :param init: lidar or random initialization of the static field
    :param dynamic: whether tracked objects become nodes (otherwise they are static)
    :param single_bin: train all timesteps in one bin
    :param on_bin: called with every bin and the static field after its training
    :return: tuple of the scene bundle and the static loss history
    :rtype: tuple
    """
    if cfg is None:
        cfg = TrainConfig()
    if raster is None:
        raster = RasterConfig()
    if lidar is None:
        lidar = LidarConfig()
    if inc is None:
        inc = IncrementalConfig()
    if gcfg is None:
        gcfg = GraphConfig()
    tracks = scene.tracks if dynamic else dict()

    # moving objects only take colors from their own timestep
    colored = colorize(scene.cloud, scene.frames, match_timesteps=lidar.match_timesteps or (len(tracks) > 0))
    static_cloud, per_object = split_by_tracks(colored, tracks)
    prior = build_prior(static_cloud, scene.frames, lidar)
    logger().info("Static prior: %s" % str(prior))

    n_timesteps = len(set(int(cam.timestep) for _, cam in scene.frames))
    if single_bin:
        n_bins = 1
    elif inc.n_bins is not None:
        n_bins = inc.n_bins
    else:
        n_bins = bins_from_depth_range(prior, inc.bin_depth)
    n_bins = max(1, min(n_bins, n_timesteps))
    schedule = partition_bins(scene.frames, n_bins, inc.overlap)

    masks = ignore_masks(scene.frames, tracks, gcfg.mask_margin)
    result = train_incremental(prior, schedule, cfg, inc, raster, init=init, background=scene.background,
                               ignore_masks=masks, init_opacity=lidar.init_opacity, on_bin=on_bin)
    static = result.field

    graph = GaussianGraph()
    for k, object_id in enumerate(sorted(tracks.keys())):
        track = tracks[object_id]
        points = per_object.get(object_id, PointCloud(np.zeros((0, 3))))
        node_field = init_node_field(points, track.extent_at(track.t0), gcfg.node_init_points, seed=cfg.seed + k,
                                     opacity=lidar.init_opacity)
        add_node(graph, object_id, node_field, track)
    if len(graph) > 0:
        graph = train_nodes(static, graph, scene.frames, cfg, gcfg, raster, priors=per_object)
        if gcfg.joint_training:
            joint_cfg = replace(cfg, total_iterations=gcfg.joint_iterations, densify=False, freeze_iterations=0)
            supervision = [(img, cam, 1.0) for img, cam in scene.frames]
            logger().info("Joint refinement of the static field: %d iterations" % gcfg.joint_iterations)
            static = train(static, supervision, prior, joint_cfg, raster=raster,
                           world_fn=static_world_fn(graph, gcfg.reference_distance),
                           sh_degree_start=static.sh_degree_active).field

    bundle = SceneBundle(static, graph, schedule, list(scene.cameras))
    bundle.history.append({"type": "reconstruct", "init": init, "dynamic": bool(dynamic),
                           "bins": len(schedule), "gaussians": len(static), "nodes": sorted(graph.nodes.keys())})
    return bundle, result.history


def scene_at(bundle: SceneBundle, t, cam: Optional[Camera] = None, reference_distance: float = 20.0,
             weather: bool = True) -> GaussianField:
    """
    The composite field at timestep t: static field, alive nodes and the
    weather layers replayed to t.
    """
    result = compose(bundle.static, bundle.graph, t, cam=cam, reference_distance=reference_distance)
    if weather and (len(bundle.weather) > 0):
        layers = [weather_at(layer, int(t)).particles for layer in bundle.weather]
        sh_degree = result.sh_degree_active
        result = GaussianField.concat([result] + layers)
        result.sh_degree_active = sh_degree
    return result


def render_view(bundle: SceneBundle, cam: Camera, raster: RasterConfig = None, reference_distance: float = 20.0,
                weather: bool = True) -> RenderOutput:
    """
    Renders the bundle from a camera at the camera's timestep.

    :param bundle: the scene
    :type bundle: SceneBundle
    :param cam: the camera
    :type cam: Camera
    :param raster: the rasterization options
    :param reference_distance: r_ref of the node opacity falloff
    :param weather: whether to include the weather layers
    :return: the rendered images
    :rtype: RenderOutput
    """
    return render(scene_at(bundle, cam.timestep, cam, reference_distance, weather), cam, raster)


def parse_timesteps(text: Optional[str]) -> Optional[List[int]]:
    """
    Parses "5", "2:8" (inclusive) or "1,3,5". None means all.
    """
    if (text is None) or (text.strip() == ""):
        return None
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise ParseError("Invalid timestep range: %s" % text)


def render_bundle(bundle: SceneBundle, cameras: Sequence[Camera], out_dir: str, raster: RasterConfig = None,
                  timesteps: Optional[Sequence[int]] = None, reference_distance: float = 20.0) -> List[str]:
    """
    Renders every camera (optionally only those at the given timesteps) and
    writes <view_id>.png and <view_id>.pfm.

    :return: the view ids written
    :rtype: list
    """
    os.makedirs(out_dir, exist_ok=True)
    result = []
    for cam in cameras:
        if (timesteps is not None) and (int(cam.timestep) not in timesteps):
            continue
        out = render_view(bundle, cam, raster, reference_distance)
        name = view_id(cam)
        write_image(os.path.join(out_dir, name + ".png"), out.color)
        write_depth(os.path.join(out_dir, name + ".pfm"), out.depth)
        result.append(name)
    logger().info("Rendered %d views to %s" % (len(result), out_dir))
    return result


def evaluate(pred_dir: str, gt_dir: str, views: Optional[List[str]] = None, config: Dict = None,
             timing: bool = False) -> MetricsReport:
    """
    Metrics of rendered against ground-truth images, with the config echoed.
    """
    report = evaluate_dirs(pred_dir, gt_dir, views=views, timing=timing)
    if config is not None:
        report.config = config
    return report


def refine_with_inpainted(bundle: SceneBundle, inpainted: Dict[str, np.ndarray], cfg: TrainConfig = None,
                          raster: RasterConfig = None, reference_distance: float = 20.0) -> SceneBundle:
    """
    Fine-tunes the static field of an edited bundle on externally repaired
    views, with the dynamic nodes composed in but held fixed.

    :param bundle: the edited scene
    :type bundle: SceneBundle
    :param inpainted: the repaired images by view id
    :type inpainted: dict
    :param cfg: the training options (total_iterations is the refinement length)
    :param raster: the rasterization options
    :param reference_distance: r_ref of the node opacity falloff
    :return: the refined copy
    :rtype: SceneBundle
    """
    if cfg is None:
        cfg = TrainConfig(total_iterations=200)
    supervision = [(inpainted[view_id(cam)], cam, 1.0) for cam in bundle.rig if view_id(cam) in inpainted]
    result = bundle.copy()
    if len(supervision) == 0:
        logger().warning("No repaired views match the bundle's cameras, skipping refinement")
        return result
    refine_cfg = replace(cfg, densify=False, freeze_iterations=0)
    logger().info("Refining on %d repaired views: %d iterations" % (len(supervision), refine_cfg.total_iterations))
    result.static = train(bundle.static, supervision, None, refine_cfg, raster=raster,
                          world_fn=static_world_fn(bundle.graph, reference_distance),
                          sh_degree_start=bundle.static.sh_degree_active).field
    result.history.append({"type": "refine", "views": sorted(view_id(s[1]) for s in supervision),
                           "iterations": refine_cfg.total_iterations})
    return result
