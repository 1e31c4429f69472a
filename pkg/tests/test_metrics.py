import json
import os

import numpy as np
import pytest

from cgs.api.core import DimensionMismatch, EmptyInput, MissingReference
from cgs.api.metrics import PSNR_CAP, MetricsReport, evaluate_dirs, psnr, write_report
from cgs.api.sceneio import write_image


def test_psnr_identical_is_capped():
    image = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(image, image) == PSNR_CAP


def test_psnr_known_value():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)


def test_psnr_matches_definition():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0.0, 1.0)
    expected = -10.0 * np.log10(np.mean((a - b) ** 2))
    assert psnr(a, b) == pytest.approx(expected)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_report_means():
    report = MetricsReport()
    image = np.full((16, 16, 3), 0.5)
    report.add("a", image, image)
    report.add("b", np.zeros((16, 16, 3)), np.full((16, 16, 3), 0.1))
    assert report.mean_psnr == pytest.approx(60.0)
    d = report.to_dict()
    assert list(d["per_view"].keys()) == ["a", "b"]
    assert d["lpips"] is None
    assert MetricsReport().mean_psnr is None


def make_dirs(tmp_path, names, offset=0.0):
    pred = os.path.join(str(tmp_path), "pred")
    gt = os.path.join(str(tmp_path), "gt")
    os.makedirs(pred)
    os.makedirs(gt)
    rng = np.random.default_rng(2)
    for name in names:
        image = rng.random((12, 12, 3)) * 0.5
        write_image(os.path.join(gt, name + ".png"), image)
        write_image(os.path.join(pred, name + ".png"), image + offset)
    return pred, gt


def test_evaluate_dirs(tmp_path):
    pred, gt = make_dirs(tmp_path, ["cam0_t001", "cam0_t000"])
    report = evaluate_dirs(pred, gt)
    assert sorted(report.per_view.keys()) == ["cam0_t000", "cam0_t001"]
    assert report.mean_psnr == PSNR_CAP
    assert report.runtime is None
    only = evaluate_dirs(pred, gt, views=["cam0_t001"], timing=True)
    assert list(only.per_view.keys()) == ["cam0_t001"]
    assert only.runtime >= 0


def test_evaluate_errors(tmp_path):
    pred, gt = make_dirs(tmp_path, ["v"])
    os.remove(os.path.join(pred, "v.png"))
    with pytest.raises(MissingReference):
        evaluate_dirs(pred, gt)
    with pytest.raises(EmptyInput):
        evaluate_dirs(pred, gt, views=["other"])
    with pytest.raises(IOError):
        evaluate_dirs(os.path.join(str(tmp_path), "nope"), gt)


def test_write_report(tmp_path):
    pred, gt = make_dirs(tmp_path, ["v"], offset=0.1)
    report = evaluate_dirs(pred, gt)
    path = os.path.join(str(tmp_path), "metrics.json")
    write_report(path, report)
    with open(path) as fp:
        data = json.load(fp)
    assert data["mean"]["psnr"] == pytest.approx(20.0, abs=0.5)
    assert data["per_view"]["v"]["ssim"] < 1.0
