import argparse
import logging
import sys
import traceback

from dataclasses import replace

import torch

from wai.logging import init_logging, add_logging_level
from cgs.api.bank import AssetBank
from cgs.api.config import load_config
from cgs.api.core import CGSError
from cgs.api.objects import export_inpaint_pairs, load_inpainted
from cgs.api.pipeline import refine_with_inpainted
from cgs.api.sceneio import PRECISION_DOUBLE, PRECISION_FLOAT, load_scene, save_scene
from cgs.api.script import apply_script, load_script
from cgs.api.trajectory import make_client


PROG = "cgs-edit"

_logger = logging.getLogger(PROG)


def edit_scene(bundle_dir: str, script: str, output_dir: str, config: str = None, bank: str = None,
               inpaint_dir: str = None, inpainted_dir: str = None, refine_iterations: int = 200, threads: int = 1,
               precision: str = PRECISION_DOUBLE):
    """
    Applies an edit script to a bundle and saves the result.

    :param bundle_dir: the bundle to edit
    :type bundle_dir: str
    :param script: the edit script (JSON)
    :type script: str
    :param output_dir: the bundle directory to write
    :type output_dir: str
    :param config: the YAML configuration, defaults if None
    :type config: str
    :param bank: the asset bank directory, the default bank if None
    :type bank: str
    :param inpaint_dir: the directory to export image/mask pairs of removals to, ignored if None
    :type inpaint_dir: str
    :param inpainted_dir: the directory with repaired <view_id>_inpainted.png images to refine on, ignored if None
    :type inpainted_dir: str
    :param refine_iterations: the iterations of the refinement on repaired images
    :type refine_iterations: int
    :param threads: the number of rasterization workers
    :type threads: int
    :param precision: the PLY precision (double/float)
    :type precision: str
    """
    cfg = load_config(config)
    raster = replace(cfg.raster, workers=threads)
    torch.set_num_threads(1)
    bundle = load_scene(bundle_dir)
    result = apply_script(bundle, load_script(script), bank=AssetBank(bank), client=make_client(cfg.trajectory),
                          cfg=cfg.editing, raster=raster, reference_distance=cfg.graph.reference_distance)
    edited = result.bundle
    if (inpaint_dir is not None) and (len(result.pairs) > 0):
        export_inpaint_pairs(inpaint_dir, result.pairs)
    if inpainted_dir is not None:
        refine_cfg = replace(cfg.train, total_iterations=refine_iterations)
        edited = refine_with_inpainted(edited, load_inpainted(inpainted_dir), refine_cfg, raster,
                                       cfg.graph.reference_distance)
    save_scene(output_dir, edited, precision=precision)
    _logger.info("Saved edited bundle: %s" % output_dir)


def main(args=None):
    """
    Parses the command-line arguments and edits the bundle.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Applies texture, weather, removal and insertion edits to a scene bundle.',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('-b', '--bundle', metavar="DIR", type=str, help='The scene bundle to edit.', required=True)
    parser.add_argument('-s', '--script', metavar="FILE", type=str, help='The edit script (JSON).', required=True)
    parser.add_argument('-o', '--out', metavar="DIR", type=str, help='The bundle directory to write.', required=True)
    parser.add_argument('-c', '--config', metavar="FILE", type=str, help='The YAML configuration.', required=False, default=None)
    parser.add_argument('--bank', metavar="DIR", type=str, help='The asset bank, uses the default bank if omitted.', required=False, default=None)
    parser.add_argument('--inpaint_dir', metavar="DIR", type=str, help='The directory to export image/mask pairs of removed objects to.', required=False, default=None)
    parser.add_argument('--inpainted', metavar="DIR", type=str, help='The directory with repaired <view_id>_inpainted.png images to refine the scene on.', required=False, default=None)
    parser.add_argument('--refine_iterations', metavar="N", type=int, help='The number of refinement iterations on repaired images.', required=False, default=200)
    parser.add_argument('-t', '--threads', metavar="N", type=int, help='The number of rasterization workers.', required=False, default=1)
    parser.add_argument('--precision', choices=[PRECISION_DOUBLE, PRECISION_FLOAT], help='The precision of the PLY files.', required=False, default=PRECISION_DOUBLE)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    edit_scene(parsed.bundle, parsed.script, parsed.out, config=parsed.config, bank=parsed.bank,
               inpaint_dir=parsed.inpaint_dir, inpainted_dir=parsed.inpainted,
               refine_iterations=parsed.refine_iterations, threads=parsed.threads, precision=parsed.precision)


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
