"""
"offnadir eval" scores a checkpoint on the val or test split with Monte Carlo
dropout, writing a per-image / per-angle / per-bin report and the F1-by-angle
curve.
"""

import argparse
import logging
import pathlib

from ..data import Manifest
from ..evaluation import evaluate, write_per_angle_csv, write_report
from ..uncertainty import McConfig
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__

REPORT_NAME = "report.tsv"
PER_ANGLE_NAME = "per_angle.csv"


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument("--ckpt", required=True, type=str, help="Checkpoint file")
    parser.add_argument("--data", required=True, type=str, help="Dataset directory")
    parser.add_argument("--out", "-o", required=True, type=str, help="Output directory")
    parser.add_argument(
        "--split", choices=("val", "test"), default="test", help="Split to evaluate"
    )
    parser.add_argument(
        "--mc-samples", type=int, default=None,
        help="Monte Carlo samples T; default from the preset",
    )
    parser.add_argument(
        "--corrected-labels",
        type=util.on_off,
        default=None,
        help="Score against view-corrected labels: on|off (default: on for test)",
    )
    parser.add_argument("--threshold", type=float, default=0.5, help="Binarization threshold")
    parser.add_argument("--seed", type=int, default=0, help="Dropout mask seed")
    util.add_preset_argument(parser)
    return parser


def main(ckpt, data, out, *, split="test", mc_samples=None, corrected_labels=None,
         threshold=0.5, seed=0, preset="desk", threads=1):
    mc_samples = util.preset_value(preset, "mc_samples", mc_samples)
    if corrected_labels is None:
        corrected_labels = split == "test"
    if not 0.0 < threshold < 1.0:
        raise util.UsageError(f"--threshold must be in (0, 1), got {threshold}")

    out = pathlib.Path(out)
    util.write_run_meta(
        out,
        "eval",
        dict(ckpt=str(ckpt), data=str(data), out=str(out), split=split,
             mc_samples=mc_samples, corrected_labels="on" if corrected_labels else "off",
             threshold=threshold, seed=seed, preset=preset),
    )
    mc = McConfig(num_samples=mc_samples, seed=seed, threads=threads)
    report = evaluate(ckpt, Manifest.read(data), split, mc, corrected_labels,
                      threshold=threshold)
    write_report(report, out / REPORT_NAME)
    write_per_angle_csv(report, out / PER_ANGLE_NAME)
    logger.info("Wrote %s and %s to %s", REPORT_NAME, PER_ANGLE_NAME, out)
    return report
