"""
Defines the exception hierarchy shared by every MetaLab module.

Operations raise these; only the command-line entry point (metalab.py) catches
them and maps each family onto a process exit code.
"""
from typing import Optional


class MetaLabError(Exception):
    """Base class for all errors raised deliberately by MetaLab."""


class ConfigError(MetaLabError):
    """An invalid, unknown or inconsistent configuration value (exit code 1)."""


class NumericalError(MetaLabError):
    """
    A numerical abort: a non-finite loss, parameter or policy output.

    Carries the outer iteration index when the failure happened inside a
    meta-training loop so the log can say exactly where training diverged.
    """

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class CheckpointError(MetaLabError):
    """A checkpoint file that is truncated, mislabelled or internally inconsistent (exit code 3)."""
