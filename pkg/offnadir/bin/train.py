"""
"offnadir train" trains a segmentation model on the train split of a generated
dataset, writing a loss log, periodic checkpoints and final.ckpt.
"""

import argparse
import logging
import pathlib

from ..data import Manifest
from ..defaults import config
from ..model import INJECTION_MODES, UNCERTAINTY_MODES, ModelConfig
from ..training import TrainConfig, load_checkpoint, train
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument("--data", required=True, type=str, help="Dataset directory")
    parser.add_argument("--out", "-o", required=True, type=str, help="Output directory")

    parser.add_argument(
        "--uncertainty",
        choices=UNCERTAINTY_MODES,
        default=None,
        help="Uncertainty modeling (default: both)",
    )

    parser.add_argument(
        "--inject",
        choices=INJECTION_MODES,
        default=None,
        help="Metadata injection (default: metacat)",
    )

    parser.add_argument("--iters", type=int, default=None, help="Training iterations")
    parser.add_argument("--batch", type=int, default=None, help="Batch size")
    parser.add_argument("--size", type=int, default=None, help="Input size in pixels")
    parser.add_argument("--seed", type=int, default=0, help="Training seed")

    parser.add_argument(
        "--lr", type=float, default=config.getfloat("optimizer", "lr0"),
        help="Initial learning rate (default: %(default)s)",
    )
    parser.add_argument(
        "--weight-decay", type=float, default=config.getfloat("optimizer", "weight_decay"),
        help="Weight decay factor (default: %(default)s)",
    )
    parser.add_argument(
        "--base-channels", type=int, default=config.getint("model", "base_channels"),
        help="Stem width (default: %(default)s)",
    )
    parser.add_argument(
        "--depth", type=int, default=config.getint("model", "encoder_depth"),
        help="Number of encoder stages (default: %(default)s)",
    )
    parser.add_argument(
        "--dropout-rate", type=float, default=config.getfloat("model", "dropout_rate"),
        help="Decoder dropout rate (default: %(default)s)",
    )
    parser.add_argument(
        "--checkpoint-every", type=int, default=0,
        help="Write a checkpoint every N iterations (default: only final.ckpt)",
    )
    parser.add_argument(
        "--eval-every", type=int, default=0,
        help="Log the validation loss every N iterations",
    )
    parser.add_argument(
        "--log-every", type=int, default=100, help="Progress log interval"
    )
    parser.add_argument(
        "--resume", type=str, default=None, help="Continue training from this checkpoint"
    )

    util.add_preset_argument(parser)
    return parser


def main(
    data,
    out,
    *,
    uncertainty=None,
    inject=None,
    iters=None,
    batch=None,
    size=None,
    seed=0,
    lr=config.getfloat("optimizer", "lr0"),
    weight_decay=config.getfloat("optimizer", "weight_decay"),
    base_channels=config.getint("model", "base_channels"),
    depth=config.getint("model", "encoder_depth"),
    dropout_rate=config.getfloat("model", "dropout_rate"),
    checkpoint_every=0,
    eval_every=0,
    log_every=100,
    resume=None,
    preset="desk",
    threads=1,
):
    checkpoint = load_checkpoint(resume) if resume else None
    if checkpoint is not None:
        model_config = checkpoint.model_config
        requested = dict(uncertainty_mode=uncertainty, injection_mode=inject, input_size=size)
        for key, value in requested.items():
            if value is not None and getattr(model_config, key) != value:
                raise util.UsageError(
                    f"--resume checkpoint has {key}={getattr(model_config, key)!r}, "
                    f"not {value!r}"
                )
    else:
        model_config = ModelConfig(
            base_channels=base_channels,
            encoder_depth=depth,
            dropout_rate=dropout_rate,
            uncertainty_mode=uncertainty or "both",
            injection_mode=inject or "metacat",
            input_size=util.preset_value(preset, "input_size", size),
        )

    train_config = TrainConfig(
        iterations=util.preset_value(preset, "iterations", iters),
        batch_size=util.preset_value(preset, "batch_size", batch),
        lr0=lr,
        weight_decay=weight_decay,
        seed=seed,
        checkpoint_every=checkpoint_every,
        eval_every=eval_every,
        log_every=log_every,
    )

    out = pathlib.Path(out)
    util.write_run_meta(
        out,
        "train",
        dict(
            data=str(data),
            out=str(out),
            resume=resume or "",
            preset=preset,
            **{f"model.{key}": value for key, value in model_config.to_dict().items()},
            **{f"train.{key}": value for key, value in train_config.to_dict().items()},
        ),
    )
    manifest = Manifest.read(data)
    train(model_config, train_config, manifest, out, resume=checkpoint, threads=threads)
