"""
Image quality metrics and evaluation reports.
"""
import logging
import os
import time

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from cgs.api.core import DimensionMismatch, EmptyInput, MissingReference
from cgs.api.losses import ssim
from cgs.api.sceneio import read_image, write_json


PSNR_CAP = 100.0


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.metrics")
    return _logger


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio of [0,1] images, capped for identical images.

    :param a: the first image
    :type a: np.ndarray
    :param b: the second image
    :type b: np.ndarray
    :return: the PSNR in dB
    :rtype: float
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("Image shapes differ: %s vs %s" % (str(a.shape), str(b.shape)))
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class MetricsReport:
    per_view: Dict[str, Dict[str, float]] = field(default_factory=dict)
    runtime: Optional[float] = None
    config: Dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> Optional[float]:
        if len(self.per_view) == 0:
            return None
        return float(np.mean([v["psnr"] for v in self.per_view.values()]))

    @property
    def mean_ssim(self) -> Optional[float]:
        if len(self.per_view) == 0:
            return None
        return float(np.mean([v["ssim"] for v in self.per_view.values()]))

    def add(self, view: str, pred: np.ndarray, gt: np.ndarray):
        self.per_view[view] = {"psnr": psnr(pred, gt), "ssim": float(ssim(pred, gt))}

    def to_dict(self) -> Dict:
        """
        The JSON form. LPIPS and CLIP direction are left for external tools.
        """
        return {
            "per_view": {k: dict(v) for k, v in sorted(self.per_view.items())},
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
            "lpips": None,
            "clip_direction": None,
            "runtime": self.runtime,
            "config": self.config,
        }


def evaluate_dirs(pred_dir: str, gt_dir: str, views: Optional[List[str]] = None, timing: bool = False) -> MetricsReport:
    """
    Compares the PNGs of the ground-truth directory with the equally named
    ones of the prediction directory.

    :param pred_dir: the rendered images
    :type pred_dir: str
    :param gt_dir: the ground-truth images
    :type gt_dir: str
    :param views: restrict to these view ids (file names without .png)
    :param timing: record the runtime (makes reports differ between runs)
    :type timing: bool
    :return: the report
    :rtype: MetricsReport
    """
    for d in (pred_dir, gt_dir):
        if not os.path.isdir(d):
            raise IOError("Directory does not exist: %s" % d)
    start = time.perf_counter()
    names = sorted(f[:-4] for f in os.listdir(gt_dir) if f.lower().endswith(".png"))
    if views is not None:
        names = [n for n in names if n in set(views)]
    if len(names) == 0:
        raise EmptyInput("No ground-truth images to evaluate in %s" % gt_dir)
    report = MetricsReport()
    for name in names:
        pred_path = os.path.join(pred_dir, name + ".png")
        if not os.path.exists(pred_path):
            raise MissingReference("No prediction for view %s: %s" % (name, pred_path))
        report.add(name, read_image(pred_path), read_image(os.path.join(gt_dir, name + ".png")))
        logger().debug("%s: psnr=%.3f ssim=%.4f" % (name, report.per_view[name]["psnr"], report.per_view[name]["ssim"]))
    if timing:
        report.runtime = time.perf_counter() - start
    logger().info("Evaluated %d views: psnr=%.3f ssim=%.4f" % (len(names), report.mean_psnr, report.mean_ssim))
    return report


def write_report(path: str, report: MetricsReport):
    write_json(path, report.to_dict())
