import argparse
import logging
import sys
import traceback

from dataclasses import replace

import torch

from wai.logging import init_logging, add_logging_level
from cgs.api.config import load_config
from cgs.api.core import CGSError
from cgs.api.incremental import INIT_METHODS, INIT_LIDAR
from cgs.api.optimizer import write_loss_history
from cgs.api.pipeline import load_scene_input, reconstruct
from cgs.api.sceneio import PRECISION_DOUBLE, PRECISION_FLOAT, save_scene


PROG = "cgs-reconstruct"

_logger = logging.getLogger(PROG)


def reconstruct_scene(scene: str, output_dir: str, config: str = None, init: str = INIT_LIDAR, dynamic: bool = True,
                      single_bin: bool = False, iterations: int = None, seed: int = None, threads: int = 1,
                      loss_history: str = None, precision: str = PRECISION_DOUBLE):
    """
    Reconstructs the scene described by the manifest and saves the bundle.

    :param scene: the scene manifest (JSON)
    :type scene: str
    :param output_dir: the bundle directory to write
    :type output_dir: str
    :param config: the YAML configuration, defaults if None
    :type config: str
    :param init: the initialization of the static field (lidar/random)
    :type init: str
    :param dynamic: whether tracked objects become dynamic nodes
    :type dynamic: bool
    :param single_bin: train all timesteps in a single bin
    :type single_bin: bool
    :param iterations: overrides the configured total iterations
    :type iterations: int
    :param seed: overrides the configured seed
    :type seed: int
    :param threads: the number of rasterization workers
    :type threads: int
    :param loss_history: the CSV file to write the static loss history to, ignored if None
    :type loss_history: str
    :param precision: the PLY precision (double/float)
    :type precision: str
    """
    cfg = load_config(config)
    train_cfg = cfg.train
    if iterations is not None:
        train_cfg = replace(train_cfg, total_iterations=iterations)
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    raster = replace(cfg.raster, workers=threads)
    torch.set_num_threads(1)
    inputs = load_scene_input(scene)
    bundle, history = reconstruct(inputs, train_cfg, raster, cfg.lidar, cfg.incremental, cfg.graph, init=init,
                                  dynamic=dynamic, single_bin=single_bin)
    save_scene(output_dir, bundle, precision=precision)
    if loss_history is not None:
        write_loss_history(loss_history, history)
    _logger.info("Saved bundle: %s" % output_dir)


def main(args=None):
    """
    Parses the command-line arguments and runs the reconstruction.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Reconstructs a dynamic scene (static field plus dynamic graph) from images, LiDAR and boxes.',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('-s', '--scene', metavar="FILE", type=str, help='The scene manifest (JSON).', required=True)
    parser.add_argument('-o', '--out', metavar="DIR", type=str, help='The bundle directory to write.', required=True)
    parser.add_argument('-c', '--config', metavar="FILE", type=str, help='The YAML configuration.', required=False, default=None)
    parser.add_argument('--init', choices=INIT_METHODS, help='The initialization of the static field.', required=False, default=INIT_LIDAR)
    parser.add_argument('--no-dynamic', dest="dynamic", action="store_false", help='Treat tracked objects as static.')
    parser.add_argument('--single-bin', dest="single_bin", action="store_true", help='Train all timesteps in a single bin.')
    parser.add_argument('-n', '--iterations', metavar="N", type=int, help='Overrides the configured number of iterations.', required=False, default=None)
    parser.add_argument('--seed', metavar="SEED", type=int, help='Overrides the configured seed.', required=False, default=None)
    parser.add_argument('-t', '--threads', metavar="N", type=int, help='The number of rasterization workers.', required=False, default=1)
    parser.add_argument('--loss_history', metavar="FILE", type=str, help='The CSV file to write the loss history to.', required=False, default=None)
    parser.add_argument('--precision', choices=[PRECISION_DOUBLE, PRECISION_FLOAT], help='The precision of the PLY files.', required=False, default=PRECISION_DOUBLE)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    reconstruct_scene(parsed.scene, parsed.out, config=parsed.config, init=parsed.init, dynamic=parsed.dynamic,
                      single_bin=parsed.single_bin, iterations=parsed.iterations, seed=parsed.seed,
                      threads=parsed.threads, loss_history=parsed.loss_history, precision=parsed.precision)


def sys_main(args=None) -> int:
    """
    Runs the main function using the system cli arguments, and
    returns a system error code.

    :param args: the arguments, sys.argv if None
    :type args: list
    :return: 0 for success, 3 for data errors, 4 for numeric failures, 1 otherwise.
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
