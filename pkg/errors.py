"""
DA-Cal Error Types
==================

One exception hierarchy for the whole toolkit. Library code raises these;
only the command-line driver turns them into exit codes.
"""

from typing import Optional


class DaCalError(Exception):
    """Base class for every error raised by this toolkit"""


class ShapeError(DaCalError, ValueError):
    """Arrays or parameter structures do not line up"""


class EmptySampleError(DaCalError, ValueError):
    """Nothing left to compute on (every pixel ignored, empty bins, ...)"""


class DomainError(DaCalError, ValueError):
    """A value lies outside its mathematical domain"""


class InsufficientDataError(DaCalError, ValueError):
    """Not enough inputs to run a fitting procedure"""


class ConfigurationError(DaCalError, ValueError):
    """Invalid configuration or a mode the checkpoint cannot serve"""


class DatasetError(DaCalError, OSError):
    """Dataset directory missing, unreadable or inconsistent"""


class TrainingFault(DaCalError, RuntimeError):
    """A non-finite quantity appeared during optimization"""

    def __init__(self, component: str, iteration: Optional[int] = None, detail: str = ""):
        self.component = component
        self.iteration = iteration
        self.detail = detail
        where = f" at iteration {iteration}" if iteration is not None else ""
        message = f"non-finite value in {component}{where}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
