"""
Exception types raised by the brain age pipeline.

Each one also derives from the built-in it specializes, so code that catches
``ValueError`` or ``ArithmeticError`` keeps working.
"""

from typing import Any, Dict, Optional


class BrainAgeError(Exception):
    """Base class for pipeline errors."""


class DimensionError(BrainAgeError, ValueError):
    """Array widths or shapes do not match what an operation expects."""


class ConfigError(BrainAgeError, ValueError):
    """Configuration values are invalid or inconsistent."""


class LoadError(BrainAgeError, ValueError):
    """An input table, sidecar or checkpoint is malformed."""


class StateError(BrainAgeError, RuntimeError):
    """An object was used before it was ready (missing cache, unfitted forest)."""


class NumericError(BrainAgeError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
