from . import analytics, channel, exc, neural, types
from ._version import __version__
from .agents import *  # NOQA: F403
from .protocol import *  # NOQA: F403
