"""
"offnadir infer" runs Monte Carlo dropout prediction on one image and exports
the probability, epistemic and aleatoric uncertainty maps as PGM files.
"""

import argparse
import logging

from ..evaluation import export_uncertainty_maps
from ..tensor import write_ten
from ..training import load_checkpoint
from ..uncertainty import McConfig, mc_predict
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument("--ckpt", required=True, type=str, help="Checkpoint file")
    parser.add_argument("--image", required=True, type=str, help="Input .ten image")
    parser.add_argument(
        "--meta",
        type=util.metadata_pair,
        default=None,
        help="Off-nadir angle and GSD of the image as ANGLE,GSD "
             "(write --meta=-7.8,0.5 for negative angles)",
    )
    parser.add_argument(
        "--mc-samples", type=int, default=None,
        help="Monte Carlo samples T; default from the preset",
    )
    parser.add_argument("--out", "-o", required=True, type=str, help="Output file prefix")
    parser.add_argument("--seed", type=int, default=0, help="Dropout mask seed")
    parser.add_argument(
        "--export-samples",
        action="store_true",
        help="Also write every logit sample as <prefix>_sample<t>.ten",
    )
    util.add_preset_argument(parser)
    return parser


def main(ckpt, image, out, *, meta=None, mc_samples=None, seed=0, export_samples=False,
         preset="desk", threads=1):
    mc_samples = util.preset_value(preset, "mc_samples", mc_samples)
    directory = util.prefix_directory(out)
    util.write_run_meta(
        directory,
        "infer",
        dict(ckpt=str(ckpt), image=str(image), meta="" if meta is None else list(meta),
             mc_samples=mc_samples, out=str(out), seed=seed,
             export_samples=export_samples, preset=preset),
    )

    checkpoint = load_checkpoint(ckpt)
    pixels, metadata = util.model_input(checkpoint, image, meta)
    mc = McConfig(num_samples=mc_samples, seed=seed, threads=threads)
    result = mc_predict(checkpoint.model, pixels, metadata, mc, keep_samples=export_samples)
    export_uncertainty_maps(result, out)
    if export_samples:
        for index, sample in enumerate(result.samples):
            write_ten(f"{out}_sample{index:03d}.ten", sample)
        logger.info("Wrote %d logit samples to %s_sample*.ten", len(result.samples), out)
    return result
