"""
"offnadir gen-data" renders the procedural off-nadir building benchmark: every
scene is viewed at every requested angle, and the scenes are split 6:2:2 into
train / val / test by location.
"""

import argparse
import logging
import pathlib

from ..data import default_angles, generate_dataset
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument(
        "--out", "-o", required=True, type=str, help="Output dataset directory"
    )

    parser.add_argument(
        "--scenes",
        type=int,
        default=None,
        help="Number of scenes (locations); default from the preset",
    )

    parser.add_argument(
        "--angles",
        type=util.float_list,
        default=None,
        help=(
            "Comma-separated off-nadir angles in degrees, including the "
            "reference angle; write --angles=-32.5,... when the list starts "
            "with a negative value (default: the conf.ini benchmark angles)"
        ),
    )

    parser.add_argument("--seed", type=int, default=0, help="Master seed")

    parser.add_argument(
        "--size", type=int, default=None, help="Image size in pixels; default from the preset"
    )

    util.add_preset_argument(parser)
    return parser


def main(out, *, scenes=None, angles=None, seed=0, size=None, preset="desk", threads=1):
    scenes = util.preset_value(preset, "n_scenes", scenes)
    size = util.preset_value(preset, "input_size", size)
    angles = default_angles() if angles is None else angles
    if seed < 0:
        raise util.UsageError(f"--seed must be non-negative, got {seed}")

    out = pathlib.Path(out)
    generate_dataset(scenes, angles, out, seed, size=size, threads=threads)
    util.write_run_meta(
        out,
        "gen-data",
        dict(out=str(out), scenes=scenes, angles=angles, seed=seed, size=size, preset=preset),
    )
