"""
The seeded synthetic driving scene used by the benchmarks: a textured
ground plane, two buildings and one vehicle driving past a four-camera rig
mounted on an ego vehicle that moves along +x.

Output layout::

    <out>/scene.json        (reconstruction manifest)
    <out>/rig.json          (all cameras)
    <out>/holdout_rig.json  (held-out cameras only)
    <out>/images/<view_id>.png
    <out>/holdout/<view_id>.png
    <out>/lidar.ply
    <out>/tracks.json
    <out>/gt/static.ply
    <out>/gt/vehicle.ply
"""
import logging
import os

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from cgs.api.gaussians import Camera, GaussianField, look_at
from cgs.api.graph import BBoxTrack, GaussianGraph, TrackEntry, add_node, compose, tracks_to_json
from cgs.api.lidar import PointCloud, write_point_cloud
from cgs.api.rasterizer import RasterConfig, render
from cgs.api.sceneio import save_field, view_id, write_camera_rig, write_image, write_json


N_TIMESTEPS = 12

WIDTH = 64
HEIGHT = 48
FOCAL = 40.0

CAMERA_HEIGHT = 1.5
EGO_SPEED = 1.0

# camera id -> viewing direction in the ego frame (y-up, left is -z)
CAMERA_DIRECTIONS = {
    "front": (1.0, 0.0, 0.0),
    "left": (0.0, 0.0, -1.0),
    "back": (-1.0, 0.0, 0.0),
    "right": (0.0, 0.0, 1.0),
}

HOLDOUT_CAMERA = "front"
HOLDOUT_TIMESTEPS = (1, 4, 7, 10)

VEHICLE_ID = "vehicle_0"
VEHICLE_EXTENT = (4.0, 1.6, 1.8)
VEHICLE_START = (2.0, 0.8, -2.5)
VEHICLE_SPEED = 1.5

BACKGROUND = (0.55, 0.7, 0.9)

LIDAR_RANGE = 25.0
LIDAR_SAMPLES = 4
LIDAR_NOISE = 0.01


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.fixture")
    return _logger


@dataclass
class Fixture:
    static: GaussianField
    graph: GaussianGraph
    cameras: List[Camera]
    holdout: List[str]
    cloud: PointCloud
    tracks: Dict[str, BBoxTrack] = field(default_factory=dict)
    seed: int = 0

    def composite(self, cam: Camera) -> GaussianField:
        return compose(self.static, self.graph, cam.timestep, cam=cam)


def _flat_gaussians(positions: np.ndarray, colors: np.ndarray, scales: np.ndarray, opacity: float,
                    provenance: str) -> GaussianField:
    result = GaussianField.from_points(positions, colors, scale=1.0, opacity=opacity, provenance=provenance)
    result.log_scales = np.log(scales)
    result.sh_degree_active = 0
    return result


def ground(rng: np.random.Generator) -> GaussianField:
    """
    120 flat Gaussians on a 12 x 10 grid at y=0 in a two-tone checker pattern.
    """
    xs = np.linspace(-2.0, 20.0, 12)
    zs = np.linspace(-9.0, 9.0, 10)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    positions = np.stack([gx.ravel(), np.zeros(gx.size), gz.ravel()], axis=1)
    checker = ((np.arange(12)[:, None] + np.arange(10)[None, :]) % 2).ravel()
    colors = np.where(checker[:, None] == 0, [0.35, 0.35, 0.33], [0.5, 0.48, 0.42])
    colors = np.clip(colors + 0.05 * (rng.random((len(positions), 3)) - 0.5), 0.0, 1.0)
    scales = np.tile([1.1, 0.02, 1.1], (len(positions), 1))
    return _flat_gaussians(positions, colors, scales, 0.95, "static")


def building(rng: np.random.Generator, lo, hi, color) -> GaussianField:
    """
    30 Gaussians filling an axis-aligned block.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    positions = lo + rng.random((30, 3)) * (hi - lo)
    colors = np.clip(np.asarray(color) + 0.1 * (rng.random((30, 3)) - 0.5), 0.0, 1.0)
    scales = np.full((30, 3), 0.7)
    return _flat_gaussians(positions, colors, scales, 0.9, "static")


def vehicle(rng: np.random.Generator) -> GaussianField:
    """
    20 Gaussians in the canonical box of the vehicle.
    """
    half = 0.4 * np.asarray(VEHICLE_EXTENT)
    positions = (rng.random((20, 3)) * 2.0 - 1.0) * half
    colors = np.clip(np.array([0.85, 0.7, 0.1]) + 0.1 * (rng.random((20, 3)) - 0.5), 0.0, 1.0)
    scales = np.full((20, 3), 0.45)
    return _flat_gaussians(positions, colors, scales, 0.95, VEHICLE_ID)


def vehicle_track() -> BBoxTrack:
    start = np.asarray(VEHICLE_START)
    entries = [TrackEntry(t, start + np.array([VEHICLE_SPEED * t, 0.0, 0.0]), 0.0, 0.0, VEHICLE_EXTENT)
               for t in range(N_TIMESTEPS)]
    return BBoxTrack(VEHICLE_ID, entries)


def camera_rig() -> List[Camera]:
    """
    Four outward cameras per timestep, slightly tilted towards the ground.
    """
    result = []
    for t in range(N_TIMESTEPS):
        eye = np.array([EGO_SPEED * t, CAMERA_HEIGHT, 0.0])
        for camera_id, direction in CAMERA_DIRECTIONS.items():
            target = eye + 10.0 * np.asarray(direction) - np.array([0.0, 2.0, 0.0])
            result.append(Camera.from_params(FOCAL, FOCAL, WIDTH / 2, HEIGHT / 2, look_at(eye, target),
                                             WIDTH, HEIGHT, timestep=t, camera_id=camera_id))
    return result


def _sample(field: GaussianField, rng: np.random.Generator, n: int) -> np.ndarray:
    chol = np.linalg.cholesky(0.25 * field.world_covariances())
    z = rng.standard_normal((len(field), n, 3))
    return (field.positions[:, None, :] + np.einsum("gij,gsj->gsi", chol, z)).reshape(-1, 3)


def lidar_sweeps(static: GaussianField, graph: GaussianGraph, rng: np.random.Generator) -> PointCloud:
    """
    Per timestep, samples points from the Gaussians within range of the ego
    position and adds sensor noise.
    """
    positions = []
    timesteps = []
    for t in range(N_TIMESTEPS):
        ego = np.array([EGO_SPEED * t, CAMERA_HEIGHT, 0.0])
        field = compose(static, graph, t)
        near = field.select(np.linalg.norm(field.positions - ego, axis=1) <= LIDAR_RANGE)
        points = _sample(near, rng, LIDAR_SAMPLES)
        points = points + LIDAR_NOISE * rng.standard_normal(points.shape)
        positions.append(points)
        timesteps.append(np.full(len(points), t, dtype=np.int64))
    return PointCloud(np.concatenate(positions), timesteps=np.concatenate(timesteps))


def generate_fixture(seed: int = 7) -> Fixture:
    """
    Builds the ground-truth scene, rig and LiDAR sweeps from the seed.

    :param seed: the seed
    :type seed: int
    :return: the fixture
    :rtype: Fixture
    """
    rng = np.random.default_rng(seed)
    static = GaussianField.concat([
        ground(rng),
        building(rng, (4.0, 0.0, 6.0), (8.0, 4.0, 8.0), (0.7, 0.3, 0.25)),
        building(rng, (12.0, 0.0, -8.0), (16.0, 5.0, -6.0), (0.25, 0.35, 0.7)),
    ])
    static.background = np.asarray(BACKGROUND)
    track = vehicle_track()
    graph = add_node(GaussianGraph(), VEHICLE_ID, vehicle(rng), track, source="fixture")
    cameras = camera_rig()
    holdout = [view_id(c) for c in cameras if (c.camera_id == HOLDOUT_CAMERA) and (c.timestep in HOLDOUT_TIMESTEPS)]
    cloud = lidar_sweeps(static, graph, rng)
    logger().info("Fixture (seed %d): %d static Gaussians, %d cameras, %d LiDAR points" % (
        seed, len(static), len(cameras), len(cloud)))
    return Fixture(static, graph, cameras, holdout, cloud, {VEHICLE_ID: track}, seed)


def write_fixture(out_dir: str, fixture: Fixture, raster: RasterConfig = None) -> List[str]:
    """
    Renders the ground-truth views and writes the fixture directory.

    :param out_dir: the output directory, created if necessary
    :type out_dir: str
    :param fixture: the fixture
    :type fixture: Fixture
    :param raster: the rasterization options
    :return: the view ids rendered
    :rtype: list
    """
    for sub in ["images", "holdout", "gt"]:
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    names = []
    holdout_cams = []
    for cam in fixture.cameras:
        name = view_id(cam)
        image = render(fixture.composite(cam), cam, raster).color
        write_image(os.path.join(out_dir, "images", name + ".png"), image)
        if name in fixture.holdout:
            write_image(os.path.join(out_dir, "holdout", name + ".png"), image)
            holdout_cams.append(cam)
        names.append(name)
    write_camera_rig(os.path.join(out_dir, "rig.json"), fixture.cameras)
    write_camera_rig(os.path.join(out_dir, "holdout_rig.json"), holdout_cams)
    write_point_cloud(os.path.join(out_dir, "lidar.ply"), fixture.cloud)
    write_json(os.path.join(out_dir, "tracks.json"), tracks_to_json(fixture.tracks))
    save_field(os.path.join(out_dir, "gt", "static.ply"), fixture.static)
    save_field(os.path.join(out_dir, "gt", "vehicle.ply"), fixture.graph.nodes[VEHICLE_ID].gaussians)
    write_json(os.path.join(out_dir, "scene.json"), {
        "version": 1,
        "rig": "rig.json",
        "images": "images",
        "lidar": "lidar.ply",
        "tracks": "tracks.json",
        "holdout": list(fixture.holdout),
        "background": [float(x) for x in fixture.static.background],
        "gt": "gt",
        "seed": fixture.seed,
    })
    logger().info("Wrote fixture with %d views to %s" % (len(names), out_dir))
    return names
