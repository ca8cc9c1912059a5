"""Discrete-time mean-field and McKean-Vlasov BSDEs with jumps on exact scenario trees."""
from .errors import (BudgetExceeded, ChaosLabError, ConfigError, DivergenceDetected,
                     NotConverged)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "BudgetExceeded", "ChaosLabError", "ConfigError",
           "DivergenceDetected", "NotConverged", "__version__"]
