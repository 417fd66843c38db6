"""
"offnadir export-acm" writes the metadata-relevant ACM product of every decoder
level of a metaacm model as a PGM map, plus a PPM overlay of the thresholded
map on the input image.
"""

import argparse
import logging

from ..evaluation import export_acm_maps
from ..tensor import no_grad
from ..training import load_checkpoint
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument("--ckpt", required=True, type=str, help="metaacm checkpoint")
    parser.add_argument("--image", required=True, type=str, help="Input .ten image")
    parser.add_argument(
        "--meta",
        required=True,
        type=util.metadata_pair,
        help="Off-nadir angle and GSD as ANGLE,GSD (write --meta=-7.8,0.5 for "
             "negative angles)",
    )
    parser.add_argument("--out", "-o", required=True, type=str, help="Output file prefix")
    parser.add_argument(
        "--threshold", type=float, default=0.5,
        help="Overlay threshold on the normalized map (default: %(default)s)",
    )
    return parser


def main(ckpt, image, meta, out, *, threshold=0.5, threads=1):
    directory = util.prefix_directory(out)
    util.write_run_meta(
        directory,
        "export-acm",
        dict(ckpt=str(ckpt), image=str(image), meta=list(meta), out=str(out),
             threshold=threshold),
    )
    checkpoint = load_checkpoint(ckpt)
    if checkpoint.model_config.injection_mode != "metaacm":
        raise util.UsageError(
            f"{ckpt} was trained with injection "
            f"{checkpoint.model_config.injection_mode!r}; export-acm needs metaacm"
        )
    pixels, metadata = util.model_input(checkpoint, image, meta)
    with no_grad():
        output = checkpoint.model.forward(pixels[None], metadata[None], bn_mode="eval")
    return export_acm_maps(output.acm_products, pixels, out, threshold=threshold)
