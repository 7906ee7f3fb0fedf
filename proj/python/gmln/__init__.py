"""Python bindings for the gmln segmentation library."""
from ._gmln import *  # noqa: F401,F403
from ._gmln import __version__  # noqa: F401
