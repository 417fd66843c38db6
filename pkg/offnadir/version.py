"""
Lazily resolved package version, shown by ``--version`` and stamped into
every ``run.meta``.
"""
import importlib.metadata
from collections import UserString
from pathlib import Path
from typing import Callable, Optional

UNKNOWN_VERSION = "0.0.unknown"
REPO_ROOT = Path(__file__).resolve().parent.parent


def _from_checkout() -> Optional[str]:
    markers = (REPO_ROOT / ".git", REPO_ROOT / ".git_archival.txt")
    if not any(marker.exists() for marker in markers):
        return None
    try:
        from setuptools_scm import get_version
        return get_version(root=str(REPO_ROOT))
    except (ImportError, LookupError):
        return None


def _from_build() -> Optional[str]:
    try:
        from ._version import version
    except ImportError:
        return None
    return version


def _from_metadata() -> Optional[str]:
    try:
        return importlib.metadata.version("offnadir")
    except importlib.metadata.PackageNotFoundError:
        return None


# A source checkout wins over a stale build or an older installed copy.
RESOLVERS: tuple[Callable[[], Optional[str]], ...] = (
    _from_checkout, _from_build, _from_metadata,
)


class VersionProxy(UserString):
    """A string that looks its value up the first time it is used."""

    def __init__(self):
        self._version = None

    @property
    def data(self) -> str:
        if self._version is None:
            found = (resolve() for resolve in RESOLVERS)
            self._version = next((version for version in found if version),
                                 UNKNOWN_VERSION)
        return self._version


__version__ = version = VersionProxy()
