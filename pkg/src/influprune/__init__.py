"""Influence- and effort-guided data pruning for few-shot sequential recommenders."""

from .dataset import *  # noqa: F401,F403
from .evaluation import *  # noqa: F401,F403
from .influence import *  # noqa: F401,F403
from .selection import *  # noqa: F401,F403
from .surrogate import *  # noqa: F401,F403
from .target import *  # noqa: F401,F403
from .cli import run  # noqa: F401

__version__ = "0.1.0"
