import os

import pytest

from cgs.api.config import Config, config_from_dict, load_config
from cgs.api.core import ParseError


def write_yaml(tmp_path, text) -> str:
    path = os.path.join(str(tmp_path), "config.yaml")
    with open(path, "w") as fp:
        fp.write(text)
    return path


def test_defaults():
    cfg = load_config(None)
    assert cfg == Config()
    assert cfg.train.total_iterations == 50000
    assert cfg.raster.tile_size == 16
    assert cfg.editing.dedup_threshold == 0.1


def test_load_yaml(tmp_path):
    path = write_yaml(tmp_path, "train:\n  total_iterations: 5\n  tssim_tiles: 2\nraster:\n  tile_size: 8\n")
    cfg = load_config(path)
    assert cfg.train.total_iterations == 5
    assert cfg.train.tssim_tiles == (2, 2)
    assert cfg.raster.tile_size == 8
    assert cfg.lidar == Config().lidar


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(write_yaml(tmp_path, "")) == Config()


def test_unknown_section(tmp_path):
    with pytest.raises(ParseError):
        load_config(write_yaml(tmp_path, "renderer:\n  fast: true\n"))


def test_unknown_key():
    with pytest.raises(ParseError):
        config_from_dict({"raster": {"tile": 8}})


def test_invalid_values():
    with pytest.raises(ParseError):
        config_from_dict({"raster": {"tile_size": 0}})
    with pytest.raises(ParseError):
        config_from_dict({"trajectory": {"mode": "remote"}})
    with pytest.raises(ParseError):
        config_from_dict(["train"])


def test_invalid_yaml(tmp_path):
    with pytest.raises(ParseError):
        load_config(write_yaml(tmp_path, "train: [1, 2\n"))


def test_missing_file(tmp_path):
    with pytest.raises(IOError):
        load_config(os.path.join(str(tmp_path), "missing.yaml"))


def test_to_dict_uses_lists():
    d = Config().to_dict()
    assert sorted(d.keys()) == ["editing", "graph", "incremental", "lidar", "raster", "train", "trajectory"]
    assert d["train"]["tssim_tiles"] == [4, 4]
    assert d["trajectory"]["mode"] == "fallback"
