import argparse
import logging
import sys
import traceback

from dataclasses import replace

import torch

from wai.logging import init_logging, add_logging_level
from cgs.api.config import load_config
from cgs.api.core import CGSError
from cgs.api.pipeline import parse_timesteps, render_bundle
from cgs.api.sceneio import load_scene, read_camera_rig


PROG = "cgs-render"

_logger = logging.getLogger(PROG)


def render_scene(bundle_dir: str, output_dir: str, cameras: str = None, timesteps: str = None, config: str = None,
                 threads: int = 1):
    """
    Renders color (PNG) and depth (PFM) of a bundle.

    :param bundle_dir: the bundle directory
    :type bundle_dir: str
    :param output_dir: the directory for the images
    :type output_dir: str
    :param cameras: the camera rig (JSON), the bundle's rig if None
    :type cameras: str
    :param timesteps: the timesteps to render ("5", "2:8", "1,3,5"), all if None
    :type timesteps: str
    :param config: the YAML configuration, defaults if None
    :type config: str
    :param threads: the number of rasterization workers
    :type threads: int
    """
    cfg = load_config(config)
    raster = replace(cfg.raster, workers=threads)
    torch.set_num_threads(1)
    bundle = load_scene(bundle_dir)
    rig = bundle.rig if cameras is None else read_camera_rig(cameras)
    names = render_bundle(bundle, rig, output_dir, raster, parse_timesteps(timesteps), cfg.graph.reference_distance)
    _logger.info("Rendered %d view(s)" % len(names))


def main(args=None):
    """
    Parses the command-line arguments and renders the bundle.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Renders images and depth maps of a scene bundle.',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('-b', '--bundle', metavar="DIR", type=str, help='The scene bundle.', required=True)
    parser.add_argument('-o', '--out', metavar="DIR", type=str, help='The output directory.', required=True)
    parser.add_argument('--cameras', metavar="FILE", type=str, help='The camera rig (JSON), uses the rig of the bundle if omitted.', required=False, default=None)
    parser.add_argument('--t', dest="timesteps", metavar="RANGE", type=str, help='The timesteps to render, e.g., 5, 2:8 or 1,3,5; all if omitted.', required=False, default=None)
    parser.add_argument('-c', '--config', metavar="FILE", type=str, help='The YAML configuration.', required=False, default=None)
    parser.add_argument('-t', '--threads', metavar="N", type=int, help='The number of rasterization workers.', required=False, default=1)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    render_scene(parsed.bundle, parsed.out, cameras=parsed.cameras, timesteps=parsed.timesteps, config=parsed.config,
                 threads=parsed.threads)


def sys_main(args=None) -> int:
    """
    Runs the main function using the system cli arguments, and
    returns a system error code.

    :param args: the arguments, sys.argv if None
    :type args: list
    :return: 0 for success, 3 for data errors, 1 otherwise.
    """
    try:
        main(args=args)
        return 0
    except CGSError as e:
        print("%s: %s" % (PROG, str(e)), file=sys.stderr)
        return e.exit_code
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    main()
