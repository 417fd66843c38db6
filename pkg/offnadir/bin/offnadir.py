"""
`offnadir` is the top-level command for generating the synthetic off-nadir
benchmark, training uncertainty-aware segmentation models and evaluating them.

Try::

"""

import argparse
import importlib
import logging

from ..version import __version__
from . import util

DESCRIPTION = __doc__


MODULES = (
    "gen_data",
    "train",
    "evaluate",
    "ablate_mc",
    "infer",
    "export_acm",
    "table",
)

COMMAND_NAMES = {
    "gen_data": "gen-data",
    "evaluate": "eval",
    "ablate_mc": "ablate-mc",
    "export_acm": "export-acm",
}

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _try_import(module):
    relative_module = f".{module}"
    return importlib.import_module(relative_module, "offnadir.bin")


def _build_commands():
    global DESCRIPTION
    result = {}
    unavailable = []

    for module in MODULES:
        command = COMMAND_NAMES.get(module, module)
        try:
            mod = _try_import(module)
        except Exception as ex:
            unavailable.append((command, ex))
        else:
            result[command] = (mod.build_arg_parser, mod.main)
            DESCRIPTION += f"\n    $ offnadir {command} --help"

    if unavailable:
        DESCRIPTION += "\n\n"

        for command, ex in unavailable:
            DESCRIPTION += (
                f"WARNING: offnadir {command!r} is unavailable due to:"
                f"\n\t{ex.__class__.__name__}: {ex}"
            )

    return result


COMMANDS = _build_commands()


def build_arg_parser():
    top_parser = util.ArgumentParser(
        prog="offnadir",
        description=DESCRIPTION,
        formatter_class=argparse.RawTextHelpFormatter,
    )

    top_parser.add_argument(
        "--version",
        "-V",
        action="version",
        version=str(__version__),
        help="Show the offnadir version number and exit.",
    )

    top_parser.add_argument(
        "--log",
        "-l",
        dest="log_level",
        default="INFO",
        type=str,
        help="Python logging level (e.g. DEBUG, INFO, WARNING)",
    )

    top_parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=(
            f"Worker threads (default: ${util.THREADS_ENV}, else the "
            f"available cores).  Results do not depend on this value."
        ),
    )

    subparsers = top_parser.add_subparsers(help="Possible subcommands")
    for command_name, (build_func, main) in COMMANDS.items():
        sub = subparsers.add_parser(command_name)
        build_func(sub)
        sub.set_defaults(func=main)
    return top_parser


def main(argv=None) -> int:
    """
    Run a subcommand.

    Returns
    -------
    int
        0 on success, 1 on a usage error, 2 if the subcommand failed.
    """
    top_parser = build_arg_parser()
    try:
        args = top_parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code if isinstance(ex.code, int) else EXIT_USAGE

    kwargs = vars(args)
    log_level = kwargs.pop("log_level")

    logger = logging.getLogger("offnadir")
    try:
        logger.setLevel(log_level.upper())
    except ValueError:
        top_parser.print_usage()
        logger.error("Unknown log level %r", log_level)
        return EXIT_USAGE
    logging.basicConfig()

    if not hasattr(args, "func"):
        top_parser.print_help()
        logger.error("No subcommand given")
        return EXIT_USAGE

    func = kwargs.pop("func")
    try:
        kwargs["threads"] = util.resolve_threads(kwargs.pop("threads"))
        logger.debug("%s(**%r)", func.__module__, kwargs)
        func(**kwargs)
    except util.UsageError as ex:
        logger.error("%s", ex)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as ex:
        logger.error("%s: %s", type(ex).__name__, ex)
        return EXIT_RUNTIME
    return EXIT_SUCCESS


if __name__ == "__main__":
    raise SystemExit(main())
