"""
Persistence of fields, images, depth maps, camera rigs and scene bundles.
"""
import json
import logging
import os
import re

from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from cgs.api.core import MissingReference, ParseError, VersionMismatch
from cgs.api.gaussians import Camera, GaussianField
from cgs.api.graph import DynamicNode, GaussianGraph, tracks_from_list
from cgs.api.incremental import BinSchedule
from cgs.api.sh import MAX_SH_DEGREE, NUM_SH_COEFFS
from cgs.api.weather import WeatherParticleSet, WeatherTrajectory, layers_to_list, spawn_weather


FORMAT_VERSION = 1

BUNDLE_MANIFEST = "bundle.json"

PRECISION_DOUBLE = "double"
PRECISION_FLOAT = "float"

BUNDLE_KEYS = ["version", "static", "static_provenance", "background", "sh_degree", "nodes", "schedule", "rig",
               "history", "weather"]


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.sceneio")
    return _logger


def view_id(cam: Camera) -> str:
    """
    The name of a view, used for rendered frames and inpainting pairs.
    """
    return "%s_t%03d" % (cam.camera_id, int(cam.timestep))


def _rest_names(count: int) -> List[str]:
    return ["f_rest_%d" % i for i in range(count)]


def save_field(path: str, field: GaussianField, precision: str = PRECISION_DOUBLE):
    """
    Writes the field as binary little-endian PLY with the property names
    used by common splatting tools. Double precision round-trips exactly.

    :param path: the output file
    :type path: str
    :param field: the field to save
    :type field: GaussianField
    :param precision: double or float
    :type precision: str
    """
    if precision not in (PRECISION_DOUBLE, PRECISION_FLOAT):
        raise ParseError("Unknown precision: %s" % precision)
    t = "<f8" if precision == PRECISION_DOUBLE else "<f4"
    n = len(field)
    n_rest = 3 * (NUM_SH_COEFFS - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] + _rest_names(n_rest) \
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    arr = np.zeros(n, dtype=[(name, t) for name in names])
    for i, c in enumerate("xyz"):
        arr[c] = field.positions[:, i]
    for i in range(3):
        arr["f_dc_%d" % i] = field.sh_coeffs[:, 0, i]
    # channel-major: all coefficients of red, then green, then blue
    rest = np.transpose(field.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, n_rest)
    for i, name in enumerate(_rest_names(n_rest)):
        arr[name] = rest[:, i]
    arr["opacity"] = field.opacity_logits
    for i in range(3):
        arr["scale_%d" % i] = field.log_scales[:, i]
    for i in range(4):
        arr["rot_%d" % i] = field.rotations[:, i]
    comments = ["cgs_version %d" % FORMAT_VERSION, "sh_degree %d" % field.sh_degree_active]
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<", comments=comments).write(path)
    logger().info("Wrote %d Gaussians to %s" % (n, path))


def _comment_value(comments: Sequence[str], key: str) -> Optional[int]:
    for c in comments:
        m = re.match(r"^\s*%s\s+(-?[0-9]+)\s*$" % key, c)
        if m is not None:
            return int(m.group(1))
    return None


def load_field(path: str) -> GaussianField:
    """
    Reads a Gaussian PLY written by save_field or another splatting tool.
    Missing higher-order SH coefficients are zero; quaternions that are not
    unit length are renormalized.

    :param path: the file to read
    :type path: str
    :return: the field
    :rtype: GaussianField
    """
    if not os.path.exists(path):
        raise IOError("Gaussian file does not exist: %s" % path)
    try:
        data = PlyData.read(path)
        v = data["vertex"]
        names = [p.name for p in v.properties]
        n = v.count

        def col(name):
            return np.asarray(v[name], dtype=np.float64)

        positions = np.stack([col("x"), col("y"), col("z")], axis=1)
        dc = np.stack([col("f_dc_%d" % i) for i in range(3)], axis=1)
        n_rest = len([name for name in names if name.startswith("f_rest_")])
        opacity = col("opacity")
        log_scales = np.stack([col("scale_%d" % i) for i in range(3)], axis=1)
        rotations = np.stack([col("rot_%d" % i) for i in range(4)], axis=1)
        rest = np.stack([col(name) for name in _rest_names(n_rest)], axis=1) if n_rest > 0 else np.zeros((n, 0))
    except (PlyParseError, ValueError, KeyError, IndexError, TypeError, EOFError) as e:
        raise ParseError("Failed to parse Gaussian PLY %s: %s" % (path, str(e)))

    version = _comment_value(data.comments, "cgs_version")
    if (version is not None) and (version != FORMAT_VERSION):
        raise VersionMismatch("%s has format version %d, expected %d" % (path, version, FORMAT_VERSION))
    if n_rest % 3 != 0:
        raise ParseError("%s: number of f_rest properties not divisible by 3: %d" % (path, n_rest))
    per_channel = n_rest // 3
    degree = int(round(np.sqrt(per_channel + 1))) - 1
    if ((degree + 1) ** 2 != per_channel + 1) or (degree > MAX_SH_DEGREE):
        raise ParseError("%s: unsupported number of SH coefficients: %d" % (path, per_channel + 1))
    sh = np.zeros((n, NUM_SH_COEFFS, 3))
    sh[:, 0, :] = dc
    if per_channel > 0:
        sh[:, 1:per_channel + 1, :] = np.transpose(rest.reshape(n, 3, per_channel), (0, 2, 1))
    active = _comment_value(data.comments, "sh_degree")
    if active is None:
        active = degree
    if not (0 <= active <= MAX_SH_DEGREE):
        raise ParseError("%s: invalid SH degree %d" % (path, active))

    norms = np.linalg.norm(rotations, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(rotations)):
        raise ParseError("%s: degenerate rotations" % path)
    off = np.abs(norms - 1.0) > 1e-6
    if np.any(off):
        rotations[off] /= norms[off, None]
    logger().info("Loaded %d Gaussians from %s" % (n, path))
    return GaussianField(positions, log_scales, rotations, sh, opacity, sh_degree_active=active)


def read_image(path: str) -> np.ndarray:
    """
    Reads an image as H x W x 3 floats in [0,1].
    """
    if not os.path.exists(path):
        raise IOError("Image does not exist: %s" % path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path: str, image: np.ndarray):
    """
    Writes H x W x 3 floats in [0,1] as 8-bit PNG.
    """
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_mask(path: str) -> np.ndarray:
    """
    Reads a mask image, pixels brighter than mid-gray are set.
    """
    if not os.path.exists(path):
        raise IOError("Mask does not exist: %s" % path)
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def write_mask(path: str, mask: np.ndarray):
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def write_depth(path: str, depth: np.ndarray):
    """
    Writes a depth map as little-endian single channel PFM (rows stored
    bottom to top).
    """
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fp:
        fp.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fp.write(np.flipud(depth).tobytes())


def read_depth(path: str) -> np.ndarray:
    """
    Reads a single channel PFM depth map.

    :param path: the file to read
    :type path: str
    :return: the H x W float32 depths
    :rtype: np.ndarray
    """
    if not os.path.exists(path):
        raise IOError("Depth map does not exist: %s" % path)
    with open(path, "rb") as fp:
        header = fp.readline().strip()
        if header != b"Pf":
            raise ParseError("%s is not a single channel PFM file" % path)
        try:
            w, h = [int(x) for x in fp.readline().split()]
            scale = float(fp.readline().strip())
        except ValueError as e:
            raise ParseError("Malformed PFM header in %s: %s" % (path, str(e)))
        data = fp.read()
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) != 4 * w * h:
        raise ParseError("%s: expected %d bytes of data, got %d" % (path, 4 * w * h, len(data)))
    return np.flipud(np.frombuffer(data, dtype=dtype).reshape(h, w)).astype("<f4")


def camera_to_dict(cam: Camera) -> Dict:
    return {
        "camera_id": cam.camera_id,
        "timestep": int(cam.timestep),
        "K": [cam.fx, cam.fy, cam.cx, cam.cy],
        "world_to_camera": [float(x) for x in cam.world_to_camera.reshape(-1)],
        "width": int(cam.width),
        "height": int(cam.height),
    }


def camera_from_dict(d: Dict) -> Camera:
    try:
        fx, fy, cx, cy = [float(x) for x in d["K"]]
        e = np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4)
        cam = Camera.from_params(fx, fy, cx, cy, e, int(d["width"]), int(d["height"]),
                                 timestep=int(d.get("timestep", 0)), camera_id=str(d["camera_id"]))
    except (KeyError, TypeError, ValueError) as ex:
        raise ParseError("Malformed camera record %s: %s" % (str(d), str(ex)))
    cam.validate()
    return cam


def read_camera_rig(path: str) -> List[Camera]:
    """
    Reads cameras from JSON, either a list of camera records or an object
    with a "cameras" list.

    :param path: the JSON file
    :type path: str
    :return: the cameras in file order
    :rtype: list
    """
    if not os.path.exists(path):
        raise IOError("Camera rig does not exist: %s" % path)
    with open(path, "r") as fp:
        try:
            data = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    if isinstance(data, dict):
        data = data.get("cameras")
    if not isinstance(data, list):
        raise ParseError("%s contains no camera list" % path)
    return [camera_from_dict(d) for d in data]


def write_camera_rig(path: str, cameras: Sequence[Camera]):
    write_json(path, {"version": FORMAT_VERSION, "cameras": [camera_to_dict(c) for c in cameras]})


def write_json(path: str, data):
    """
    Writes JSON with sorted keys so repeated runs produce identical files.
    """
    with open(path, "w") as fp:
        json.dump(data, fp, indent=2, sort_keys=True)
        fp.write("\n")


@dataclass
class SceneBundle:
    """
    A reconstructed (and possibly edited) scene.
    """
    static: GaussianField
    graph: GaussianGraph = dc_field(default_factory=GaussianGraph)
    schedule: Optional[BinSchedule] = None
    rig: List[Camera] = dc_field(default_factory=list)
    history: List[Dict] = dc_field(default_factory=list)
    weather: List[WeatherParticleSet] = dc_field(default_factory=list)
    version: int = FORMAT_VERSION

    def copy(self) -> "SceneBundle":
        graph = GaussianGraph({k: DynamicNode(n.object_id, [f.copy() for f in n.frames], n.track, n.source)
                               for k, n in self.graph.nodes.items()})
        return SceneBundle(self.static.copy(), graph, self.schedule, list(self.rig), [dict(h) for h in self.history],
                           list(self.weather), self.version)


def save_scene(directory: str, bundle: SceneBundle, precision: str = PRECISION_DOUBLE):
    """
    Writes the bundle manifest and the Gaussian files it references.

    :param directory: the output directory, created if necessary
    :type directory: str
    :param bundle: the scene
    :type bundle: SceneBundle
    :param precision: the PLY precision, double round-trips exactly
    :type precision: str
    """
    os.makedirs(directory, exist_ok=True)
    save_field(os.path.join(directory, "static.ply"), bundle.static, precision)
    nodes = []
    for node in bundle.graph.ordered():
        node_dir = os.path.join("nodes", node.object_id)
        os.makedirs(os.path.join(directory, node_dir), exist_ok=True)
        frames = []
        for i, f in enumerate(node.frames):
            name = os.path.join(node_dir, "frame_%04d.ply" % i).replace(os.sep, "/")
            save_field(os.path.join(directory, name), f, precision)
            frames.append(name)
        nodes.append({"object_id": node.object_id, "source": node.source, "frames": frames,
                      "track": node.track.to_list()})
    write_camera_rig(os.path.join(directory, "rig.json"), bundle.rig)
    manifest = {
        "version": bundle.version,
        "static": "static.ply",
        "static_provenance": [str(p) for p in bundle.static.provenance],
        "background": [float(x) for x in bundle.static.background],
        "sh_degree": int(bundle.static.sh_degree_active),
        "nodes": nodes,
        "schedule": None if bundle.schedule is None else bundle.schedule.to_dict(),
        "rig": "rig.json",
        "history": bundle.history,
        "weather": layers_to_list(bundle.weather),
    }
    write_json(os.path.join(directory, BUNDLE_MANIFEST), manifest)
    logger().info("Saved scene bundle to %s" % directory)


def _reference(directory: str, name: str) -> str:
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise MissingReference("Scene bundle references missing file: %s" % path)
    return path


def load_scene(directory: str) -> SceneBundle:
    """
    Loads a bundle written by save_scene. Unknown manifest keys are ignored
    with a warning.

    :param directory: the bundle directory
    :type directory: str
    :return: the scene
    :rtype: SceneBundle
    """
    path = os.path.join(directory, BUNDLE_MANIFEST)
    if not os.path.exists(path):
        raise IOError("Scene bundle manifest does not exist: %s" % path)
    with open(path, "r") as fp:
        try:
            manifest = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    if not isinstance(manifest, dict) or ("version" not in manifest):
        raise ParseError("%s has no version field" % path)
    if manifest["version"] != FORMAT_VERSION:
        raise VersionMismatch("Bundle version %s, expected %d" % (str(manifest["version"]), FORMAT_VERSION))
    for key in sorted(set(manifest.keys()) - set(BUNDLE_KEYS)):
        logger().warning("Ignoring unknown key in %s: %s" % (path, key))

    try:
        static = load_field(_reference(directory, manifest["static"]))
        provenance = manifest.get("static_provenance")
        if provenance is not None:
            if len(provenance) != len(static):
                raise ParseError("Provenance list has %d entries for %d Gaussians" % (len(provenance), len(static)))
            static.provenance = np.array(provenance, dtype=object)
        if manifest.get("background") is not None:
            static.background = np.asarray(manifest["background"], dtype=np.float64).reshape(3)
        if manifest.get("sh_degree") is not None:
            static.sh_degree_active = int(manifest["sh_degree"])

        graph = GaussianGraph()
        for entry in manifest.get("nodes", []):
            object_id = str(entry["object_id"])
            tracks = tracks_from_list(entry["track"])
            frames = []
            for name in entry["frames"]:
                f = load_field(_reference(directory, name))
                f.provenance[:] = object_id
                frames.append(f)
            graph.nodes[object_id] = DynamicNode(object_id, frames, tracks[object_id], entry.get("source", "trained"))

        rig = []
        if manifest.get("rig") is not None:
            rig = read_camera_rig(_reference(directory, manifest["rig"]))
        schedule = None
        if manifest.get("schedule") is not None:
            schedule = BinSchedule.from_dict(manifest["schedule"])

        weather = []
        for layer in manifest.get("weather", []):
            traj = None if layer.get("trajectory") is None else WeatherTrajectory.from_dict(layer["trajectory"])
            weather.append(spawn_weather(layer["kind"], (layer["p_min"], layer["p_max"]), int(layer["count"]),
                                         int(layer["seed"]), trajectory=traj))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError("Malformed scene bundle %s: %s" % (path, str(e)))

    return SceneBundle(static, graph, schedule, rig, list(manifest.get("history", [])), weather,
                       int(manifest["version"]))


def read_frames(image_dir: str, cameras: Sequence[Camera]) -> List[Tuple[np.ndarray, Camera]]:
    """
    Loads the image of every camera from <image_dir>/<view_id>.png.

    :param image_dir: the directory with the images
    :param cameras: the cameras
    :return: the (image, camera) pairs
    :rtype: list
    """
    result = []
    for cam in cameras:
        path = os.path.join(image_dir, view_id(cam) + ".png")
        if not os.path.exists(path):
            raise MissingReference("No image for view %s: %s" % (view_id(cam), path))
        result.append((read_image(path), cam))
    return result
