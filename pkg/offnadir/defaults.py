import configparser
import importlib.resources
import logging

logger = logging.getLogger(__name__)

PRESETS = ("desk", "paper")

config = configparser.ConfigParser()
config.read_string(
    importlib.resources.files("offnadir")
    .joinpath("default_settings/conf.ini")
    .read_text(encoding="utf-8")
)


def preset(name: str) -> dict:
    """
    Get the command-line defaults for a named preset.

    Parameters
    ----------
    name : {'desk', 'paper'}
        The preset section of ``conf.ini``.

    Returns
    -------
    dict
        With keys {'input_size', 'batch_size', 'iterations', 'mc_samples',
        'n_scenes'}.
    """
    if name not in PRESETS:
        raise ValueError(f"Unknown preset {name!r}; expected one of {PRESETS}")

    section = config[name]
    return {key: section.getint(key) for key in section}


def float_list(section: str, key: str) -> list[float]:
    """Parse a comma-separated list of floats from ``conf.ini``."""
    return [float(item) for item in config.get(section, key).split(",")]


def int_list(section: str, key: str) -> list[int]:
    """Parse a comma-separated list of integers from ``conf.ini``."""
    return [int(item) for item in config.get(section, key).split(",")]
