"""Randomized asymmetric chains of low-rank adapters on convex testbeds."""

__version__ = "0.1.0"

from .core.optimizers import ChainConfig, InnerSolver, Method, run_chain  # noqa: E402,F401
from .core.sketch import SketchSide, SketchSpec  # noqa: E402,F401
from .errors import RacLoraError  # noqa: E402,F401
