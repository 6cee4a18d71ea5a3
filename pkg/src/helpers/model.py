from typing import Any

from src.helpers.constants import (
    EXIT_CORRUPTION,
    EXIT_GUARD,
    EXIT_INPUT_ERROR,
    EXIT_PROPERTY_FAILURE,
)


class EngineError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes a command."""

    exit_code: int = EXIT_INPUT_ERROR

    def __init__(self, error: str = "An unknown error occurred", exit_code: int | None = None):
        self.error = error
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(self.error)

    def payload(self) -> dict[str, Any]:
        return {"message": self.error, "exit_code": self.exit_code, "kind": type(self).__name__}


class DimensionError(EngineError, ValueError):
    def __init__(self, operation: str, axis: str, expected: Any, actual: Any):
        self.operation = operation
        self.axis = axis
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{operation}: dimension mismatch on axis '{axis}' (expected {expected}, got {actual})"
        )


class ConfigurationError(EngineError, ValueError):
    pass


class DivergenceError(EngineError, ArithmeticError):
    exit_code = EXIT_PROPERTY_FAILURE

    def __init__(self, phase: str, step: int):
        self.phase = phase
        self.step = step
        super().__init__(f"non-finite neuron state in {phase} phase at step {step}")


class ParseError(EngineError, ValueError):
    def __init__(self, path: str, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {reason} at byte offset {offset}")


class DigestMismatchError(EngineError, ValueError):
    pass


class GuardError(EngineError, RuntimeError):
    exit_code = EXIT_GUARD


class CorruptionError(EngineError, ValueError):
    exit_code = EXIT_CORRUPTION


class PropertyFailure(EngineError, AssertionError):
    exit_code = EXIT_PROPERTY_FAILURE
