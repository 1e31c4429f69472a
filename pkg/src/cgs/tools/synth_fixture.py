import argparse
import logging
import sys
import traceback

import torch

from wai.logging import init_logging, add_logging_level
from cgs.api.core import CGSError
from cgs.api.fixture import generate_fixture, write_fixture


PROG = "cgs-synth-fixture"

_logger = logging.getLogger(PROG)


def main(args=None):
    """
    Parses the command-line arguments and writes the synthetic scene.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Generates the synthetic driving scene (ground-truth Gaussians, rig, views, LiDAR, boxes).',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('--seed', metavar="SEED", type=int, help='The seed of the scene.', required=False, default=7)
    parser.add_argument('-o', '--out', metavar="DIR", type=str, help='The output directory.', required=True)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    torch.set_num_threads(1)
    names = write_fixture(parsed.out, generate_fixture(parsed.seed))
    _logger.info("Wrote %d views to %s" % (len(names), parsed.out))


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
