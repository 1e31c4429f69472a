import argparse
import logging
import sys
import traceback

from wai.logging import init_logging, add_logging_level
from cgs.api.bank import AssetBank, CATEGORIES
from cgs.api.core import CGSError


PROG = "cgs-ingest-asset"

_logger = logging.getLogger(PROG)


def main(args=None):
    """
    Parses the command-line arguments and ingests the asset.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Adds a Gaussian PLY (or a directory of per-timestep PLYs) to the foreground bank.',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('-i', '--input', metavar="PATH", type=str, help='The PLY file or directory of numbered PLY files.', required=True)
    parser.add_argument('-a', '--asset_id', metavar="ID", type=str, help='The id to store the asset under.', required=True)
    parser.add_argument('--category', choices=CATEGORIES, help='The asset category.', required=True)
    parser.add_argument('-e', '--extent', metavar="M", type=float, nargs=3, help='The target box extent (length, height, width) in meters.', required=True)
    parser.add_argument('--source', metavar="TEXT", type=str, help='Free-text origin of the asset, the input path if omitted.', required=False, default=None)
    parser.add_argument('--bank', metavar="DIR", type=str, help='The asset bank, uses the default bank if omitted.', required=False, default=None)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    asset = AssetBank(parsed.bank).ingest(parsed.input, parsed.asset_id, parsed.category, parsed.extent,
                                          source=parsed.source)
    print("%s: %s, %d frame(s)" % (asset.asset_id, asset.category, len(asset.frames)))


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
