"""
Helpers shared by the command-line tools.
"""
import argparse
import datetime
import logging
import os
import pathlib
import sys
from typing import Optional

import jinja2
import numpy as np

from .. import defaults
from ..data import normalize_metadata, resize_image
from ..tensor import read_ten
from ..version import __version__

logger = logging.getLogger(__name__)

THREADS_ENV = "OFFNADIR_THREADS"
RUN_META_NAME = "run.meta"

_jinja_env = jinja2.Environment(
    loader=jinja2.PackageLoader("offnadir", "templates"),
    trim_blocks=True,
    lstrip_blocks=True,
)


class UsageError(Exception):
    """Incompatible or incomplete command-line arguments."""


class ArgumentParser(argparse.ArgumentParser):
    """Exit with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def resolve_threads(threads: Optional[int] = None) -> int:
    """``threads``, else ``$OFFNADIR_THREADS``, else the available cores."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            threads = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") \
                else (os.cpu_count() or 1)
    if threads < 1:
        raise UsageError(f"Thread count must be >= 1, got {threads}")
    return threads


def float_list(text: str) -> list:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def int_list(text: str) -> list:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def metadata_pair(text: str) -> tuple:
    """``ANGLE,GSD`` as two floats."""
    values = float_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected ANGLE,GSD, got {text!r}")
    return tuple(values)


def on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {text!r}")
    return text == "on"


def add_preset_argument(parser):
    parser.add_argument(
        "--preset",
        choices=defaults.PRESETS,
        default="desk",
        help="Named set of defaults for unspecified options (default: desk)",
    )


def preset_value(preset: str, key: str, value=None):
    """``value`` if given, else the preset's default for ``key``."""
    return defaults.preset(preset)[key] if value is None else value


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_run_meta(command: str, arguments: dict, timestamp: Optional[str] = None) -> str:
    if timestamp is None:
        timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    template = _jinja_env.get_template("run_meta.jinja2")
    items = [(key, _format(arguments[key])) for key in sorted(arguments)]
    return template.render(command=command, version=str(__version__),
                           timestamp=timestamp, arguments=items)


def write_run_meta(directory, command: str, arguments: dict) -> pathlib.Path:
    """Record the resolved configuration of a run as ``run.meta``."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RUN_META_NAME
    path.write_text(render_run_meta(command, arguments), encoding="utf-8")
    logger.debug("Wrote %s", path)
    return path


def read_run_meta(path) -> dict:
    """Parse ``run.meta`` into a dictionary of strings."""
    values = {}
    for line in pathlib.Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("\t")
        values[key] = value
    return values


def prefix_directory(prefix) -> pathlib.Path:
    """The directory receiving files written under an output prefix."""
    directory = pathlib.Path(prefix).parent
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def load_image(path, size: int) -> np.ndarray:
    """Read a ``[C, H, W]`` ``.ten`` image and resize it to ``size``."""
    image = read_ten(path)
    if image.ndim == 4 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 3:
        raise ValueError(f"{path}: expected a [C, H, W] image, got shape {image.shape}")
    return resize_image(image.astype(np.float32), size)


def model_input(checkpoint, image_path, meta):
    """
    The image and normalized metadata for a checkpoint's model.

    ``meta`` is the raw ``(angle, gsd)`` pair; it may be omitted only for
    models without metadata injection.
    """
    config = checkpoint.model_config
    image = load_image(image_path, config.input_size)
    if image.shape[0] != config.input_channels:
        raise ValueError(
            f"{image_path}: image has {image.shape[0]} channels, the model expects "
            f"{config.input_channels}"
        )
    if config.injection_mode == "none":
        return image, None
    if meta is None:
        raise UsageError(f"--meta ANGLE,GSD is required for {config.injection_mode} models")
    return image, normalize_metadata(meta, checkpoint.meta_stats)
