"""
"offnadir table" compares evaluation reports by off-nadir category
(Nadir / Off-Nadir / Very Off-Nadir / Overall), marking the best F1 per column.
"""

import argparse
import logging
import pathlib

from ..evaluation import ablation_table, read_report
from . import util

logger = logging.getLogger(__name__)
DESCRIPTION = __doc__

TABLE_NAME = "table.txt"


def named_report(text):
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=FILE, got {text!r}")
    return name, path


def build_arg_parser(parser=None):
    if parser is None:
        parser = util.ArgumentParser()

    parser.description = DESCRIPTION
    parser.formatter_class = argparse.RawTextHelpFormatter

    parser.add_argument(
        "--report",
        dest="reports",
        action="append",
        type=named_report,
        required=True,
        help="A report to include, as NAME=FILE (repeatable)",
    )
    parser.add_argument("--out", "-o", required=True, type=str, help="Output directory")
    parser.add_argument("--title", type=str, default="F1 by off-nadir category")
    return parser


def main(reports, out, *, title="F1 by off-nadir category", threads=1):
    names = [name for name, _ in reports]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise util.UsageError(f"Duplicate report names: {duplicates}")

    out = pathlib.Path(out)
    util.write_run_meta(
        out, "table", dict(reports=[f"{name}={path}" for name, path in reports],
                           out=str(out), title=title),
    )
    parsed = {name: read_report(path) for name, path in reports}
    ground_truths = {report.ground_truth for report in parsed.values()}
    caption = f"ground truth: {', '.join(sorted(ground_truths))}"
    text = ablation_table(parsed, title=title, caption=caption)
    (out / TABLE_NAME).write_text(text, encoding="utf-8")
    print(text, end="")
    return text
