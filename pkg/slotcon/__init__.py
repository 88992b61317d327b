from .cli import cli
from ._version import __version__
