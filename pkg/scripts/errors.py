"""
Error hierarchy for tinysr-search
Every error knows the CLI exit code it maps to
"""

from typing import Any, Dict, Optional, Sequence


class TinySRError(Exception):
    """Base class for all domain errors"""

    exit_code = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(TinySRError, ValueError):
    exit_code = 2


class InvalidGenome(TinySRError, ValueError):
    exit_code = 2


class ParseError(TinySRError, ValueError):
    """Malformed JSON artifact; `path` names the offending field"""

    exit_code = 2

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "path": self.path}


class ShapeError(TinySRError, ValueError):
    def __init__(self, message: str, expected: Optional[Sequence] = None,
                 actual: Optional[Sequence] = None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ShapeMismatch(TinySRError, ValueError):
    pass


class StateError(TinySRError, RuntimeError):
    pass


class NonFiniteMetric(TinySRError, ValueError):
    pass


class DivergedError(TinySRError, ArithmeticError):
    exit_code = 3


class CheckpointError(TinySRError, OSError):
    exit_code = 4


class ReplayMismatch(TinySRError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "step": self.step}


class SearchError(TinySRError):
    """The search cannot make progress (e.g. every sample is gate-rejected)"""
