"""
Exception hierarchy for the FedPass laboratory.
Library code raises these; the runner, scheduler and CLI catch FedPassError,
log it and keep going.
"""
from typing import Any, Dict, Optional


class FedPassError(Exception):
    """Root of every error raised by the laboratory."""


class ShapeMismatchError(FedPassError):
    def __init__(self, message: str, layer_index: Optional[int] = None, expected: Any = None, actual: Any = None):
        self.layer_index = layer_index
        self.expected = expected
        self.actual = actual
        where = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(f"{where}{message} (expected={expected}, actual={actual})")


class NonFiniteError(FedPassError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"Non-finite values produced by {where}")


class PassportError(FedPassError):
    pass


class ProtocolError(FedPassError):
    def __init__(self, message: str, party: Optional[str] = None, round: Optional[int] = None):
        self.party = party
        self.round = round
        super().__init__(f"[party={party} round={round}] {message}")


class AlignmentError(FedPassError):
    pass


class AttackError(FedPassError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} | diagnostics={self.diagnostics}")


class DatasetFormatError(FedPassError):
    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{message} (expected={expected}, actual={actual})")


class ConfigError(FedPassError):
    pass


class OutOfScopeError(FedPassError):
    pass


class TheoryError(FedPassError):
    pass
