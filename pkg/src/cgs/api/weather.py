"""
Particle weather (rain, snow, fog) and snow coverage of upward facing
surfaces.
"""
import logging

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy.spatial import cKDTree

from cgs.api.core import BadBounds, DataError, EmptyInput, UnknownTrajectory
from cgs.api.gaussians import Camera, GaussianField, logit, project_points
from cgs.api.sh import NUM_SH_COEFFS, rgb_to_sh
from cgs.api.texture import normals_from_depth, point_map


KIND_RAIN = "rain"
KIND_SNOW = "snow"
KIND_FOG = "fog"
KINDS = [KIND_RAIN, KIND_SNOW, KIND_FOG]

WHITE_TOLERANCE = 0.05
""" maximum deviation of snow and rain colors from white """

SNOW_SCALE = 0.03
SNOW_FLATTEN = 0.3
SNOW_EPSILON = 1e-3
SNOW_OPACITY = 0.9

RAIN_SCALE = 0.005
RAIN_ELONGATION = (10.0, 15.0)
RAIN_OPACITY = 0.4

FOG_SCALE_RATIO = 0.15
FOG_OPACITY = 0.03

UP = np.array([0.0, 1.0, 0.0])


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.weather")
    return _logger


def _vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.array([float(arr), 0.0, 0.0]) if name == "v_horizontal" else np.array([0.0, float(arr), 0.0])
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise UnknownTrajectory("Parameter '%s' must be a finite scalar or 3-vector: %s" % (name, str(v)))
    return arr


def constant_fall(v=(0.0, -1.0, 0.0)) -> Callable[[int], np.ndarray]:
    """
    Constant displacement per timestep. A scalar v is a vertical speed.
    """
    disp = _vector(v, "v")
    return lambda t: disp


def fall_with_drift(v=(0.0, -1.0, 0.0), amplitude: float = 0.1, period: float = 10.0) -> Callable[[int], np.ndarray]:
    """
    Constant fall plus a sinusoidal sideways drift along x.

    :param v: the fall displacement per timestep
    :param amplitude: the drift amplitude per timestep
    :param period: the drift period in timesteps
    """
    disp = _vector(v, "v")
    if period <= 0:
        raise UnknownTrajectory("Drift period must be positive: %s" % str(period))

    def _f(t):
        return disp + np.array([amplitude * np.sin(2.0 * np.pi * t / period), 0.0, 0.0])
    return _f


def fog_drift(v_horizontal=(0.1, 0.0, 0.0)) -> Callable[[int], np.ndarray]:
    """
    Horizontal drift only; the vertical component is dropped.
    """
    disp = _vector(v_horizontal, "v_horizontal").copy()
    disp[1] = 0.0
    return lambda t: disp


TRAJECTORY_FUNCTIONS = {
    "constant_fall": constant_fall,
    "fall_with_drift": fall_with_drift,
    "fog_drift": fog_drift,
}


@dataclass
class WeatherTrajectory:
    """
    A named displacement function and its parameters.
    """
    name: str
    params: Dict = field(default_factory=dict)

    def function(self) -> Callable[[int], np.ndarray]:
        if self.name not in TRAJECTORY_FUNCTIONS:
            raise UnknownTrajectory("Unknown weather trajectory '%s', available: %s"
                                    % (self.name, ", ".join(sorted(TRAJECTORY_FUNCTIONS))))
        try:
            return TRAJECTORY_FUNCTIONS[self.name](**self.params)
        except TypeError as e:
            raise UnknownTrajectory("Invalid parameters for '%s': %s" % (self.name, str(e)))

    def displacement(self, t: int) -> np.ndarray:
        return self.function()(t)

    def to_dict(self) -> Dict:
        return {"name": self.name, "params": {k: (np.asarray(v).tolist()) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: Dict) -> "WeatherTrajectory":
        return cls(str(d["name"]), dict(d.get("params", {})))


TrajectoryLike = Union[WeatherTrajectory, Dict, Callable[[int], np.ndarray]]


def _as_function(trajectory: TrajectoryLike) -> Callable[[int], np.ndarray]:
    if isinstance(trajectory, WeatherTrajectory):
        return trajectory.function()
    if isinstance(trajectory, dict):
        return WeatherTrajectory.from_dict(trajectory).function()
    if callable(trajectory):
        return trajectory
    raise UnknownTrajectory("Not a weather trajectory: %s" % str(trajectory))


@dataclass
class WeatherParticleSet:
    """
    Weather particles as Gaussians, confined to the box [p_min, p_max].
    """
    kind: str
    p_min: np.ndarray
    p_max: np.ndarray
    seed: int
    particles: GaussianField
    timestep: int = 0
    trajectory: Optional[WeatherTrajectory] = None

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def extent(self) -> np.ndarray:
        return self.p_max - self.p_min

    def wrap(self, positions: np.ndarray) -> np.ndarray:
        """
        Recycles positions that left the box back in from the opposite side.
        """
        return self.p_min + np.mod(positions - self.p_min, self.extent)


def check_bounds(p_min, p_max) -> Tuple[np.ndarray, np.ndarray]:
    p_min = np.asarray(p_min, dtype=np.float64).reshape(-1)
    p_max = np.asarray(p_max, dtype=np.float64).reshape(-1)
    if (p_min.shape != (3,)) or (p_max.shape != (3,)):
        raise BadBounds("Bounds must be 3-vectors")
    if not (np.all(np.isfinite(p_min)) and np.all(np.isfinite(p_max))):
        raise BadBounds("Bounds must be finite")
    if np.any(p_max <= p_min):
        raise BadBounds("Upper bound %s not above lower bound %s" % (str(p_max), str(p_min)))
    return p_min, p_max


def _yaw_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    yaw = rng.uniform(0.0, 2.0 * np.pi, n)
    result = np.zeros((n, 4))
    result[:, 0] = np.cos(0.5 * yaw)
    result[:, 2] = np.sin(0.5 * yaw)
    return result


def spawn_weather(kind: str, bounds: Sequence, count: int, seed: int,
                  trajectory: Optional[WeatherTrajectory] = None) -> WeatherParticleSet:
    """
    Spawns particles uniformly inside the bounds with a seeded generator.

    :param kind: rain, snow or fog
    :type kind: str
    :param bounds: the tuple (p_min, p_max)
    :param count: the number of particles
    :type count: int
    :param seed: the seed for the generator
    :type seed: int
    :param trajectory: the motion to store with the set
    :return: the particles
    :rtype: WeatherParticleSet
    """
    if kind not in KINDS:
        raise DataError("Unknown weather kind '%s', available: %s" % (kind, ", ".join(KINDS)))
    if count <= 0:
        raise EmptyInput("Particle count must be positive: %d" % count)
    p_min, p_max = check_bounds(bounds[0], bounds[1])
    rng = np.random.default_rng(seed)
    zeta = rng.random((count, 3))
    positions = zeta * (p_max - p_min) + p_min

    if kind == KIND_SNOW:
        colors = 1.0 - WHITE_TOLERANCE * rng.random((count, 3))
        horizontal = SNOW_SCALE * (1.0 + 0.2 * rng.random((count, 2)))
        vertical = SNOW_FLATTEN * horizontal.min(axis=1) + SNOW_EPSILON
        scales = np.stack([horizontal[:, 0], vertical, horizontal[:, 1]], axis=1)
        opacity = SNOW_OPACITY
    elif kind == KIND_RAIN:
        colors = 1.0 - WHITE_TOLERANCE * rng.random((count, 3))
        ratio = rng.uniform(RAIN_ELONGATION[0], RAIN_ELONGATION[1], count)
        scales = np.stack([np.full(count, RAIN_SCALE), RAIN_SCALE * ratio, np.full(count, RAIN_SCALE)], axis=1)
        opacity = RAIN_OPACITY
    else:
        colors = np.repeat(0.8 + 0.1 * rng.random((count, 1)), 3, axis=1)
        scales = np.full((count, 3), FOG_SCALE_RATIO * float((p_max - p_min).min()))
        opacity = FOG_OPACITY
    rotations = _yaw_quaternions(rng, count)

    sh = np.zeros((count, NUM_SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh(colors)
    particles = GaussianField(positions, np.log(scales), rotations, sh, np.full(count, logit(opacity)),
                              provenance="weather:" + kind)
    logger().info("Spawned %d %s particles (seed=%d)" % (count, kind, seed))
    return WeatherParticleSet(kind, p_min, p_max, seed, particles, trajectory=trajectory)


def advance_weather(particles: WeatherParticleSet, t: int, trajectory: Optional[TrajectoryLike] = None) -> WeatherParticleSet:
    """
    Moves every particle by the displacement of timestep t and recycles the
    ones that left the box.

    :param particles: the current state
    :type particles: WeatherParticleSet
    :param t: the timestep of the current state
    :type t: int
    :param trajectory: the motion, defaults to the one stored with the set
    :return: the state at t+1
    :rtype: WeatherParticleSet
    """
    if trajectory is None:
        trajectory = particles.trajectory
    if trajectory is None:
        raise UnknownTrajectory("No trajectory given for the weather particles")
    disp = np.asarray(_as_function(trajectory)(t), dtype=np.float64)
    moved = particles.particles.copy()
    moved.positions = particles.wrap(moved.positions + disp)
    return replace(particles, particles=moved, timestep=t + 1)


def weather_at(particles: WeatherParticleSet, t: int, trajectory: Optional[TrajectoryLike] = None) -> WeatherParticleSet:
    """
    Replays the motion from the spawn state up to timestep t. A set without
    any trajectory stays where it was spawned.

    :param particles: the spawned state (timestep 0)
    :param t: the target timestep
    :param trajectory: the motion, defaults to the one stored with the set
    :return: the state at t
    :rtype: WeatherParticleSet
    """
    if trajectory is None:
        trajectory = particles.trajectory
    if (t <= 0) or (trajectory is None):
        return replace(particles, particles=particles.particles.copy(), timestep=max(t, 0))
    func = _as_function(trajectory)
    result = particles
    for step in range(particles.timestep, t):
        result = advance_weather(result, step, func)
    return result


def camera_normals_to_world(normals: np.ndarray, cam: Camera) -> np.ndarray:
    """
    Turns depth-image normals (s_x, s_y, 1) into world-space normals that
    face the camera. The camera looks along +z, so the facing normal has a
    negative z component before the rotation.

    :param normals: the H x W x 3 normals from normals_from_depth
    :param cam: the camera of the depth map
    :return: the H x W x 3 world normals
    :rtype: np.ndarray
    """
    facing = np.asarray(normals, dtype=np.float64) * np.array([1.0, 1.0, -1.0])
    return facing @ cam.rotation


def snow_coverage(frames: Sequence[Tuple[np.ndarray, Camera]], up_threshold: float = 0.8,
                  dedup_threshold: float = 0.1, up: Sequence[float] = UP,
                  max_depth: Optional[float] = None) -> np.ndarray:
    """
    Collects world points of upward facing surfaces over several views.
    Normals come from the Sobel gradients of each depth map. A point of a
    later frame is only kept if no point accepted from an earlier frame lies
    within the dedup threshold. Frames are processed in order.

    :param frames: the (depth map, camera) pairs
    :param up_threshold: the minimum dot product of normal and up direction
    :type up_threshold: float
    :param dedup_threshold: the minimum distance to earlier points (meters)
    :type dedup_threshold: float
    :param up: the world up direction
    :param max_depth: ignore pixels further away than this
    :return: the accepted positions, shape (M, 3)
    :rtype: np.ndarray
    """
    if len(frames) == 0:
        raise EmptyInput("No frames for snow coverage")
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    accepted = np.zeros((0, 3))
    for i, (depth, cam) in enumerate(frames):
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        if max_depth is not None:
            valid &= depth <= max_depth
        if not np.any(valid):
            continue
        filled = np.where(valid, depth, depth[valid].mean())
        points = point_map(filled, cam)
        normals = camera_normals_to_world(normals_from_depth(filled), cam)
        sel = valid & (normals @ up >= up_threshold)
        candidates = points[sel]
        if (len(accepted) > 0) and (len(candidates) > 0):
            dist, _ = cKDTree(accepted).query(candidates, k=1)
            candidates = candidates[dist >= dedup_threshold]
        logger().debug("Frame %d (%s@%d): %d snow points" % (i, cam.camera_id, cam.timestep, len(candidates)))
        accepted = np.concatenate([accepted, candidates], axis=0)
    logger().info("Snow coverage: %d points from %d frames" % (len(accepted), len(frames)))
    return accepted


def snow_cover_field(positions: np.ndarray, size: float = 0.05, seed: int = 0,
                     opacity: float = SNOW_OPACITY) -> GaussianField:
    """
    Flat white Gaussians lying on covered surfaces.

    :param positions: the covered points, shape (M, 3)
    :param size: the horizontal standard deviation (meters)
    :param seed: the seed for the color jitter
    :param opacity: the activated opacity
    :return: the snow layer
    :rtype: GaussianField
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    rng = np.random.default_rng(seed)
    colors = 1.0 - WHITE_TOLERANCE * rng.random((n, 3))
    scales = np.tile([size, SNOW_FLATTEN * size + SNOW_EPSILON, size], (n, 1))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, NUM_SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh(colors)
    return GaussianField(positions, np.log(scales), rotations, sh, np.full(n, logit(opacity)),
                         provenance="weather:snow_cover")


def snow_blend(image: np.ndarray, mask: np.ndarray, strength: float = 0.6) -> np.ndarray:
    """
    Lightens the masked pixels of an image towards white.

    :param image: the H x W x 3 image in [0,1]
    :param mask: the H x W coverage in [0,1] (bool works too)
    :param strength: the blend weight for fully covered pixels
    :return: the blended image
    :rtype: np.ndarray
    """
    image = np.asarray(image, dtype=np.float64)
    w = strength * np.asarray(mask, dtype=np.float64)[..., None]
    return np.clip(image * (1.0 - w) + w, 0.0, 1.0)


def coverage_mask(positions: np.ndarray, cam: Camera, radius: int = 1) -> np.ndarray:
    """
    Marks the pixels covered by projected snow points.

    :param positions: the snow points
    :param cam: the camera
    :param radius: the dilation in pixels
    :return: the H x W boolean mask
    :rtype: np.ndarray
    """
    result = np.zeros((cam.height, cam.width), dtype=bool)
    if len(positions) == 0:
        return result
    pix, _, valid = project_points(np.asarray(positions).reshape(-1, 3), cam)
    uv = np.round(pix[valid]).astype(int)
    for du in range(-radius, radius + 1):
        for dv in range(-radius, radius + 1):
            u = uv[:, 0] + du
            v = uv[:, 1] + dv
            ok = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            result[v[ok], u[ok]] = True
    return result


def layers_to_list(layers: List[WeatherParticleSet]) -> List[Dict]:
    """
    Describes weather layers for the scene manifest. Particles are respawned
    from kind, bounds, count and seed on load.
    """
    result = []
    for layer in layers:
        result.append({
            "kind": layer.kind,
            "p_min": layer.p_min.tolist(),
            "p_max": layer.p_max.tolist(),
            "seed": int(layer.seed),
            "count": len(layer),
            "trajectory": None if layer.trajectory is None else layer.trajectory.to_dict(),
        })
    return result
