from .cli import __version__  # NOQA: F401
from .cli import cli  # NOQA: F401
