"""
"offnadir ablate-mc" measures F1 against the number of Monte Carlo samples T,
alongside a single deterministic pass of the same model (regular dropout) and,
optionally, a model trained without dropout.
"""

import argparse
import logging
import pathlib

from ..data import Manifest
from ..defaults import int_list
from ..evaluation import ablate_mc_samples, write_report
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__

CSV_NAME = "ablation.csv"


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument("--ckpt", required=True, type=str,
                        help="Checkpoint trained with dropout")
    parser.add_argument("--no-dropout-ckpt", type=str, default=None,
                        help="Checkpoint trained without dropout (no_dropout baseline)")
    parser.add_argument("--data", required=True, type=str, help="Dataset directory")
    parser.add_argument("--out", "-o", required=True, type=str, help="Output directory")
    parser.add_argument(
        "--samples",
        type=util.int_list,
        default=int_list("benchmark", "ablation_samples"),
        help="Comma-separated sample counts T (default: 1,2,5,10,20,30,40,50)",
    )
    parser.add_argument("--split", choices=("val", "test"), default="val")
    parser.add_argument(
        "--seeds", type=util.int_list, default=[0],
        help="Comma-separated evaluation seeds; rows are averaged over them",
    )
    parser.add_argument(
        "--corrected-labels", type=util.on_off, default=False,
        help="Score against view-corrected labels: on|off (default: off)",
    )
    parser.add_argument("--threshold", type=float, default=0.5)
    return parser


def main(ckpt, data, out, *, no_dropout_ckpt=None, samples=None, split="val", seeds=(0,),
         corrected_labels=False, threshold=0.5, threads=1):
    samples = int_list("benchmark", "ablation_samples") if samples is None else samples
    if not samples or min(samples) < 1:
        raise util.UsageError(f"--samples must be positive integers, got {samples}")
    if not seeds or min(seeds) < 0:
        raise util.UsageError(f"--seeds must be non-negative integers, got {seeds}")
    baselines = ("regular_dropout",)
    if no_dropout_ckpt:
        baselines += ("no_dropout",)
    else:
        logger.warning("No --no-dropout-ckpt given; the no_dropout row is omitted")

    out = pathlib.Path(out)
    util.write_run_meta(
        out,
        "ablate-mc",
        dict(ckpt=str(ckpt), no_dropout_ckpt=no_dropout_ckpt or "", data=str(data),
             out=str(out), samples=list(samples), split=split, seeds=list(seeds),
             corrected_labels="on" if corrected_labels else "off", threshold=threshold),
    )
    result = ablate_mc_samples(
        ckpt, Manifest.read(data), samples, no_dropout_checkpoint=no_dropout_ckpt,
        baselines=baselines, split=split, seeds=list(seeds),
        use_corrected_labels=corrected_labels, threshold=threshold, threads=threads,
    )
    result.write_csv(out / CSV_NAME)
    for label, reports in result.reports.items():
        for report in reports:
            name = f"T{label}" if label.isdigit() else label
            write_report(report, out / f"report_{name}_seed{report.seed}.tsv")
    logger.info("Wrote %s with %d rows to %s", CSV_NAME, len(result.rows), out)
    return result
