"""GradMA: gradient-memory federated learning with QP-corrected updates."""

from .flcore import ConfigError, DivergenceError, Federation, MetricsRow, RunConfig, run
from .strategies import make_strategy

__all__ = ["ConfigError", "DivergenceError", "Federation", "MetricsRow", "RunConfig", "make_strategy", "run"]
__version__ = "0.1.0"
