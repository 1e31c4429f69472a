"""
Loading of the YAML configuration file. Every section is optional; unknown
sections and unknown keys are rejected.

Example::

    train:
      total_iterations: 5000
      seed: 7
    raster:
      tile_size: 16
    incremental:
      n_bins: 3
    editing:
      dedup_threshold: 0.1
    trajectory:
      mode: remote
      url: http://localhost:8000/predict
"""
import logging
import os

from dataclasses import dataclass, field, asdict
from typing import Dict

import yaml

from cgs.api.core import ParseError
from cgs.api.graph import GraphConfig
from cgs.api.incremental import IncrementalConfig
from cgs.api.lidar import LidarConfig
from cgs.api.optimizer import TrainConfig
from cgs.api.rasterizer import RasterConfig
from cgs.api.script import EditConfig
from cgs.api.trajectory import TrajectoryConfig


SECTIONS = {
    "train": TrainConfig,
    "raster": RasterConfig,
    "lidar": LidarConfig,
    "incremental": IncrementalConfig,
    "graph": GraphConfig,
    "editing": EditConfig,
    "trajectory": TrajectoryConfig,
}


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.config")
    return _logger


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    incremental: IncrementalConfig = field(default_factory=IncrementalConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    editing: EditConfig = field(default_factory=EditConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)

    def to_dict(self) -> Dict:
        """
        The plain form, echoed into evaluation reports.
        """
        result = dict()
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            result[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in section.items()}
        return result


def config_from_dict(d: Dict) -> Config:
    """
    Builds the configuration from a parsed mapping.

    :param d: the mapping (None for all defaults)
    :type d: dict
    :return: the configuration
    :rtype: Config
    """
    if d is None:
        d = dict()
    if not isinstance(d, dict):
        raise ParseError("Configuration must be a mapping")
    unknown = sorted(set(d.keys()) - set(SECTIONS.keys()))
    if len(unknown) > 0:
        raise ParseError("Unknown configuration section(s): %s" % ", ".join(unknown))
    kwargs = {name: cls.from_dict(d.get(name)) for name, cls in SECTIONS.items()}
    return Config(**kwargs)


def load_config(path: str = None) -> Config:
    """
    Loads the configuration from a YAML file; None returns the defaults.

    :param path: the YAML file
    :type path: str
    :return: the configuration
    :rtype: Config
    """
    if path is None:
        return Config()
    if not os.path.exists(path):
        raise IOError("Configuration file does not exist: %s" % path)
    with open(path, "r") as fp:
        try:
            data = yaml.safe_load(fp)
        except yaml.YAMLError as e:
            raise ParseError("Failed to parse %s: %s" % (path, str(e)))
    logger().info("Loaded configuration: %s" % path)
    return config_from_dict(data)
