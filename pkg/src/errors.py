"""Typed failures raised across the manifold pipeline."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Union


class ManifoldError(Exception):
    """Base class for every failure the pipeline raises on purpose."""

    exit_code: int = 1


class ConfigError(ManifoldError, ValueError):
    """Invalid parameters detected before any work starts."""

    exit_code = 2


class DataError(ManifoldError, ValueError):
    """Input data violates a documented invariant."""

    exit_code = 3


class FeatureTableError(DataError):
    """A feature CSV could not be parsed."""

    def __init__(self, path: Union[str, Path], line: Optional[int], message: str) -> None:
        self.path = Path(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else str(self.path)
        super().__init__(f"{where}: {message}")


class AssignmentError(ManifoldError, IndexError):
    """A sub-class or class index points outside its valid range."""

    exit_code = 3


class NumericError(ManifoldError, ArithmeticError):
    """Non-finite values or degenerate vectors reached a numeric routine."""

    exit_code = 4


__all__ = [
    "ManifoldError",
    "ConfigError",
    "DataError",
    "FeatureTableError",
    "AssignmentError",
    "NumericError",
]
