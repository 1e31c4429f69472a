"""
The foreground bank: a directory of Gaussian assets (static or per-timestep
sequences) that can be inserted into scenes.

Layout::

    <root>/bank.lock                 (present while ingesting)
    <root>/<asset_id>/meta.json
    <root>/<asset_id>/frame_0000.ply
    ...
"""
import json
import logging
import os

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from cgs.api.core import BankLocked, DegenerateAsset, ParseError, UnknownAsset, get_default_bank_dir
from cgs.api.gaussians import GaussianField
from cgs.api.sceneio import load_field, save_field, write_json


CATEGORIES = ["vehicle", "pedestrian", "animal", "static_prop"]

LOCK_FILE = "bank.lock"

META_FILE = "meta.json"

EXTENT_SLACK = 1.5


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.bank")
    return _logger


@dataclass
class Asset:
    asset_id: str
    category: str
    frames: List[GaussianField]
    extent: np.ndarray
    source: str = ""
    meta: Dict = field(default_factory=dict)

    @property
    def is_4d(self) -> bool:
        return len(self.frames) > 1

    def frame(self, offset: int) -> GaussianField:
        return self.frames[int(offset) % len(self.frames)]

    def validate(self):
        if np.any(self.extent <= 0):
            raise DegenerateAsset("Asset %s: extent must be positive" % self.asset_id)
        half = 0.5 * EXTENT_SLACK * self.extent
        for i, f in enumerate(self.frames):
            f.validate()
            if np.any(np.abs(f.positions) > half + 1e-9):
                raise DegenerateAsset("Asset %s, frame %d: Gaussians outside the extent box" % (self.asset_id, i))
        return self


def _frame_files(path: str) -> List[str]:
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.lower().endswith(".ply"))
        if len(files) == 0:
            raise ParseError("No PLY files in directory: %s" % path)
        return [os.path.join(path, f) for f in files]
    if not os.path.exists(path):
        raise IOError("Asset does not exist: %s" % path)
    return [path]


def normalize_frames(frames: Sequence[GaussianField], target_extent) -> List[GaussianField]:
    """
    Recenters the frames on the center of their joint bounding box and
    scales them uniformly (one factor for all frames) so that the box fits
    the target extent.

    :param frames: the asset frames
    :param target_extent: the extent to fit (meters)
    :return: the normalized frames
    :rtype: list
    """
    target = np.asarray(target_extent, dtype=np.float64).reshape(3)
    if np.any(target <= 0):
        raise DegenerateAsset("Target extent must be positive: %s" % str(target))
    positions = np.concatenate([f.positions for f in frames], axis=0)
    if len(positions) == 0:
        raise DegenerateAsset("Asset has no Gaussians")
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    extent = hi - lo
    nonzero = extent > 0
    if not np.any(nonzero):
        raise DegenerateAsset("Asset has zero extent")
    factor = float(np.min(target[nonzero] / extent[nonzero]))
    center = 0.5 * (lo + hi)
    result = []
    for f in frames:
        g = f.copy()
        g.positions = (f.positions - center) * factor
        g.log_scales = f.log_scales + np.log(factor)
        g.covariances = None
        result.append(g)
    logger().debug("Normalized asset: center=%s, factor=%g" % (str(center), factor))
    return result


class AssetBank:
    """
    Read-mostly asset store. Ingestion takes an exclusive lock file.
    """

    def __init__(self, root: str = None):
        """
        :param root: the bank directory, the default bank if None
        :type root: str
        """
        if root is None:
            root = get_default_bank_dir()
        self.root = root

    def _asset_dir(self, asset_id: str) -> str:
        return os.path.join(self.root, asset_id)

    def ingest(self, path: str, asset_id: str, category: str, target_extent, source: str = None) -> Asset:
        """
        Loads a Gaussian PLY (or a directory of numbered PLYs for a 4D asset),
        normalizes it to the target extent and stores it in the bank.

        :param path: the PLY file or directory
        :type path: str
        :param asset_id: the id to store the asset under
        :type asset_id: str
        :param category: vehicle, pedestrian, animal or static_prop
        :type category: str
        :param target_extent: the box extent (meters)
        :param source: free-text origin, the path if None
        :return: the stored asset
        :rtype: Asset
        """
        if category not in CATEGORIES:
            raise ParseError("Unknown asset category '%s', available: %s" % (category, ", ".join(CATEGORIES)))
        if source is None:
            source = path
        frames = [load_field(f) for f in _frame_files(path)]
        frames = normalize_frames(frames, target_extent)
        asset = Asset(asset_id, category, frames, np.asarray(target_extent, dtype=np.float64).reshape(3), source)
        asset.validate()

        os.makedirs(self.root, exist_ok=True)
        lock = os.path.join(self.root, LOCK_FILE)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise BankLocked("Asset bank is locked: %s" % lock)
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            out_dir = self._asset_dir(asset_id)
            if os.path.exists(out_dir):
                logger().warning("Replacing asset: %s" % asset_id)
                for name in os.listdir(out_dir):
                    os.remove(os.path.join(out_dir, name))
            os.makedirs(out_dir, exist_ok=True)
            for i, f in enumerate(frames):
                save_field(os.path.join(out_dir, "frame_%04d.ply" % i), f)
            asset.meta = {
                "asset_id": asset_id,
                "category": category,
                "extent": [float(x) for x in asset.extent],
                "n_frames": len(frames),
                "source": source,
            }
            write_json(os.path.join(out_dir, META_FILE), asset.meta)
        finally:
            os.remove(lock)
        logger().info("Ingested asset %s (%s, %d frame(s))" % (asset_id, category, len(frames)))
        return asset

    def load(self, asset_id: str) -> Asset:
        """
        Loads all frames and the metadata of an asset.

        :param asset_id: the asset
        :type asset_id: str
        :return: the asset
        :rtype: Asset
        """
        meta_path = os.path.join(self._asset_dir(asset_id), META_FILE)
        if not os.path.exists(meta_path):
            raise UnknownAsset("Unknown asset: %s" % asset_id)
        with open(meta_path, "r") as fp:
            try:
                meta = json.load(fp)
            except json.JSONDecodeError as e:
                raise ParseError("Failed to parse %s: %s" % (meta_path, str(e)))
        frames = []
        for i in range(int(meta["n_frames"])):
            frames.append(load_field(os.path.join(self._asset_dir(asset_id), "frame_%04d.ply" % i)))
        return Asset(asset_id, meta["category"], frames, np.asarray(meta["extent"], dtype=np.float64),
                     meta.get("source", ""), meta)

    def get(self, asset_id: str, timestep_offset: int = 0) -> GaussianField:
        """
        Returns the frame for the timestep offset; static assets ignore the
        offset, sequences repeat.

        :param asset_id: the asset
        :type asset_id: str
        :param timestep_offset: the offset from the insertion timestep
        :type timestep_offset: int
        :return: the Gaussians in the canonical frame
        :rtype: GaussianField
        """
        return self.load(asset_id).frame(timestep_offset)

    def list_assets(self) -> List[str]:
        """
        Returns the ids of all stored assets, sorted.
        """
        if not os.path.isdir(self.root):
            return []
        return sorted(d for d in os.listdir(self.root) if os.path.exists(os.path.join(self.root, d, META_FILE)))

    def export(self, asset_id: str, path: str) -> List[str]:
        """
        Writes the asset as a single PLY (static) or as a directory of
        numbered PLYs (4D).

        :param asset_id: the asset
        :param path: the output file or directory
        :return: the written files
        :rtype: list
        """
        asset = self.load(asset_id)
        if not asset.is_4d:
            save_field(path, asset.frames[0])
            return [path]
        os.makedirs(path, exist_ok=True)
        result = []
        for i, f in enumerate(asset.frames):
            out = os.path.join(path, "frame_%04d.ply" % i)
            save_field(out, f)
            result.append(out)
        return result
