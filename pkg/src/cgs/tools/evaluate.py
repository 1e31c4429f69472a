import argparse
import logging
import sys
import traceback

from wai.logging import init_logging, add_logging_level
from cgs.api.config import load_config
from cgs.api.core import CGSError
from cgs.api.metrics import write_report
from cgs.api.pipeline import evaluate


PROG = "cgs-eval"

_logger = logging.getLogger(PROG)


def evaluate_views(pred_dir: str, gt_dir: str, report: str = None, config: str = None, views: str = None,
                   timing: bool = False):
    """
    Computes PSNR and SSIM of the rendered against the ground-truth images.

    :param pred_dir: the directory with the rendered PNGs
    :type pred_dir: str
    :param gt_dir: the directory with the ground-truth PNGs
    :type gt_dir: str
    :param report: the JSON report to write, printed to stdout if None
    :type report: str
    :param config: the YAML configuration to echo into the report, ignored if None
    :type config: str
    :param views: comma-separated view ids to restrict the evaluation to, all if None
    :type views: str
    :param timing: whether to record the runtime
    :type timing: bool
    """
    echo = dict() if config is None else load_config(config).to_dict()
    selected = None if views is None else [v.strip() for v in views.split(",") if v.strip() != ""]
    result = evaluate(pred_dir, gt_dir, views=selected, config=echo, timing=timing)
    if report is None:
        for name, values in sorted(result.per_view.items()):
            print("%s: psnr=%.3f ssim=%.4f" % (name, values["psnr"], values["ssim"]))
        print("mean: psnr=%.3f ssim=%.4f" % (result.mean_psnr, result.mean_ssim))
    else:
        write_report(report, result)
        _logger.info("Saved report: %s" % report)


def main(args=None):
    """
    Parses the command-line arguments and evaluates the views.

    :param args: the arguments, sys.argv if None
    :type args: list
    """
    parser = argparse.ArgumentParser(
        description='Evaluates rendered views against ground truth (PSNR, SSIM).',
        prog=PROG,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('-p', '--pred', metavar="DIR", type=str, help='The directory with the rendered images.', required=True)
    parser.add_argument('-g', '--gt', metavar="DIR", type=str, help='The directory with the ground-truth images.', required=True)
    parser.add_argument('-r', '--report', metavar="FILE", type=str, help='The JSON report to write, prints to stdout if omitted.', required=False, default=None)
    parser.add_argument('-c', '--config', metavar="FILE", type=str, help='The YAML configuration to echo into the report.', required=False, default=None)
    parser.add_argument('--views', metavar="IDS", type=str, help='Comma-separated view ids to evaluate.', required=False, default=None)
    parser.add_argument('--timing', action="store_true", help='Whether to record the runtime in the report.')
    add_logging_level(parser)
    parsed = parser.parse_args(args=args)

    init_logging(default_level=parsed.logging_level)
    evaluate_views(parsed.pred, parsed.gt, report=parsed.report, config=parsed.config, views=parsed.views,
                   timing=parsed.timing)


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
