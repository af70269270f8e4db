"""
RTRL DESK - Error hierarchy
Every contract violation in the engine raises a subclass of ReIDError.
"""

from typing import Optional


class ReIDError(Exception):
    """Base class for all engine errors"""


class DimensionError(ReIDError):
    """Shape mismatch between operands, layers or descriptors"""


class ContractError(ReIDError):
    """A documented precondition was violated"""


class EmptySequenceError(ContractError):
    """A sequence with zero frames reached an operation that needs T >= 1"""


class NumericError(ReIDError):
    """Non-finite value or degenerate norm"""


class ConfigError(ReIDError):
    """Config parse or validation failure"""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ReIDError):
    """Corrupt tensor file or checkpoint"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DatasetError(ReIDError):
    """Malformed dataset layout or unwritable destination"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class ProtocolError(ReIDError):
    """Evaluation protocol cannot be applied to the given data"""


class CheckpointError(ReIDError):
    """Missing or incompatible checkpoint"""
