"""Python bindings for the hiermem C++ core."""

from ._hiermem import *  # noqa: F401,F403
from ._hiermem import __doc__, version

__version__ = version()
