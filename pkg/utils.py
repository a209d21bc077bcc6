"""
Provides common, stateless utility functions used across the application.

This module is a collection of simple, reusable helpers that do not fit into
a more specific module: the 95% confidence interval every evaluation protocol
reports and float formatting for CSV output.
"""
import math
from typing import Iterable

import numpy as np

import config


def confidence_interval(values: Iterable[float], z: float = config.CI_Z) -> tuple[float, float]:
    """
    Mean and 95% confidence half-width (z times the standard error) of `values`.

    A single value has a half-width of 0.

    Raises:
        ValueError: If `values` is empty.
    """
    array = np.asarray(list(values), dtype=np.float64)
    if array.size == 0:
        raise ValueError("Cannot compute a confidence interval of no values.")
    mean = float(array.mean())
    if array.size == 1:
        return mean, 0.0
    stderr = float(array.std(ddof=1)) / math.sqrt(array.size)
    return mean, z * stderr


def format_float(value: float) -> str:
    """Shortest representation that parses back to the same float64."""
    return repr(float(value))
