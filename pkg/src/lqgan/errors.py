"""Structured errors shared across the package.

Each error carries an exit code used by the command line and a ``context``
dict that is serialized to JSON on stderr.
"""

from __future__ import annotations

from typing import Any


class LqgError(Exception):
    exit_code = 1
    kind = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.kind, "message": self.message, "exit_code": self.exit_code, **self.context}


class ConfigError(LqgError, ValueError):
    exit_code = 2
    kind = "config"


class ShapeError(LqgError, ValueError):
    exit_code = 2
    kind = "shape"


class DataError(LqgError, ValueError):
    exit_code = 3
    kind = "data"


class NumericalError(LqgError, FloatingPointError):
    exit_code = 4
    kind = "numerical"


class NoOptimumError(LqgError):
    exit_code = 5
    kind = "no_optimum"
