import argparse
import sys
import traceback

from wai.logging import init_logging, add_logging_level
from cgs.api.bank import AssetBank
from cgs.api.core import CGSError


PROG = "cgs-list-assets"


def list_assets(bank: str = None):
    """
    Lists the assets of the foreground bank.

    :param bank: the bank directory, the default bank if None
    :type bank: str
    """
    store = AssetBank(bank)
    for asset_id in store.list_assets():
        asset = store.load(asset_id)
        print(asset_id)
        print("   category:", asset.category)
        print("   extent:", " x ".join("%.3f" % x for x in asset.extent))
        print("   frames:", len(asset.frames))
        if asset.source:
            print("   source:", asset.source)
        print()


def main(args=None):
    """
    Parses the command-line arguments and lists the assets.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Lists the assets in the foreground bank.',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('--bank', metavar="DIR", type=str, help='The asset bank, uses the default bank if omitted.', required=False, default=None)
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    list_assets(parsed.bank)


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
