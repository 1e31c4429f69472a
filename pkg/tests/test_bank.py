import json
import os

import numpy as np
import pytest

from cgs.api.bank import LOCK_FILE, AssetBank, normalize_frames
from cgs.api.core import BankLocked, DegenerateAsset, ParseError, UnknownAsset
from cgs.api.gaussians import GaussianField
from cgs.api.sceneio import save_field


def box_asset(half=(2.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0), scale=0.1) -> GaussianField:
    """
    Gaussians on the corners and center of a box.
    """
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)] + [[0, 0, 0]],
                     dtype=np.float64)
    positions = signs * np.asarray(half) + np.asarray(offset)
    return GaussianField.from_points(positions, np.full((9, 3), 0.5), scale=scale, opacity=0.8)


def write_asset(directory, name, field) -> str:
    path = os.path.join(directory, name)
    save_field(path, field)
    return path


def test_normalize_keeps_fitting_asset():
    asset = box_asset()
    result = normalize_frames([asset], (4.0, 2.0, 2.0))[0]
    np.testing.assert_allclose(result.positions, asset.positions, atol=1e-12)
    np.testing.assert_allclose(result.log_scales, asset.log_scales, atol=1e-12)


def test_normalize_scales_uniformly():
    asset = box_asset(half=(4.0, 2.0, 2.0), offset=(10.0, 0.0, -3.0))
    result = normalize_frames([asset], (4.0, 2.0, 2.0))[0]
    np.testing.assert_allclose(result.positions, box_asset().positions, atol=1e-12)
    np.testing.assert_allclose(np.exp(result.log_scales), 0.05, rtol=1e-12)


def test_normalize_uses_tightest_axis():
    asset = box_asset(half=(1.0, 1.0, 1.0))
    result = normalize_frames([asset], (4.0, 1.0, 4.0))[0]
    extent = result.positions.max(axis=0) - result.positions.min(axis=0)
    np.testing.assert_allclose(extent, [1.0, 1.0, 1.0], atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(DegenerateAsset):
        normalize_frames([box_asset(half=(0.0, 0.0, 0.0))], (1.0, 1.0, 1.0))
    with pytest.raises(DegenerateAsset):
        normalize_frames([GaussianField.empty()], (1.0, 1.0, 1.0))
    with pytest.raises(DegenerateAsset):
        normalize_frames([box_asset()], (1.0, 0.0, 1.0))


def test_ingest_and_get(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    path = write_asset(str(tmp_path), "car.ply", box_asset(half=(4.0, 2.0, 2.0)))
    asset = bank.ingest(path, "sedan", "vehicle", (4.0, 2.0, 2.0))
    assert not asset.is_4d
    loaded = bank.get("sedan")
    np.testing.assert_allclose(loaded.positions, box_asset().positions, atol=1e-12)
    with open(os.path.join(bank.root, "sedan", "meta.json")) as fp:
        meta = json.load(fp)
    assert meta["category"] == "vehicle"
    assert meta["extent"] == [4.0, 2.0, 2.0]
    assert not os.path.exists(os.path.join(bank.root, LOCK_FILE))


def test_ingest_4d_sequence(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    seq = os.path.join(str(tmp_path), "walker")
    os.makedirs(seq)
    for i in range(3):
        write_asset(seq, "frame_%02d.ply" % i, box_asset(half=(0.3, 0.9, 0.3), offset=(0.1 * i, 0.0, 0.0)))
    asset = bank.ingest(seq, "walker", "pedestrian", (0.8, 1.8, 0.8))
    assert asset.is_4d
    loaded = bank.load("walker")
    np.testing.assert_array_equal(bank.get("walker", 4).positions, loaded.frames[1].positions)
    np.testing.assert_array_equal(bank.get("walker", 0).positions, loaded.frames[0].positions)
    # the frames share one normalization, so the motion survives
    assert not np.allclose(loaded.frames[0].positions, loaded.frames[2].positions)


def test_static_asset_ignores_offset(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    bank.ingest(write_asset(str(tmp_path), "cone.ply", box_asset(half=(0.2, 0.4, 0.2))), "cone", "static_prop",
                (0.4, 0.8, 0.4))
    np.testing.assert_array_equal(bank.get("cone", 7).positions, bank.get("cone").positions)


def test_ingest_errors(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    empty = os.path.join(str(tmp_path), "empty.ply")
    open(empty, "w").close()
    with pytest.raises(ParseError):
        bank.ingest(empty, "x", "vehicle", (1.0, 1.0, 1.0))
    path = write_asset(str(tmp_path), "a.ply", box_asset())
    with pytest.raises(ParseError):
        bank.ingest(path, "x", "spaceship", (1.0, 1.0, 1.0))
    with pytest.raises(IOError):
        bank.ingest(os.path.join(str(tmp_path), "missing.ply"), "x", "vehicle", (1.0, 1.0, 1.0))
    with pytest.raises(UnknownAsset):
        bank.get("x")


def test_ingest_respects_lock(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    os.makedirs(bank.root)
    open(os.path.join(bank.root, LOCK_FILE), "w").close()
    with pytest.raises(BankLocked):
        bank.ingest(write_asset(str(tmp_path), "a.ply", box_asset()), "a", "vehicle", (4.0, 2.0, 2.0))
    assert bank.list_assets() == []


def test_list_assets_sorted(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    assert bank.list_assets() == []
    path = write_asset(str(tmp_path), "a.ply", box_asset())
    for asset_id in ["truck", "bus", "van"]:
        bank.ingest(path, asset_id, "vehicle", (4.0, 2.0, 2.0))
    assert bank.list_assets() == ["bus", "truck", "van"]


def test_export(tmp_path):
    bank = AssetBank(os.path.join(str(tmp_path), "bank"))
    bank.ingest(write_asset(str(tmp_path), "a.ply", box_asset()), "box", "static_prop", (4.0, 2.0, 2.0))
    out = os.path.join(str(tmp_path), "out.ply")
    assert bank.export("box", out) == [out]
    assert os.path.exists(out)
