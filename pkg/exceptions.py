from typing import Optional, Dict, Any


class ResaError(Exception):
    """Base exception with error context"""

    exit_code = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = context or {}


class ConfigurationError(ResaError, ValueError):
    """Configuration-related errors"""
    exit_code = 2


class DimensionError(ResaError, ValueError):
    """Shapes or grid dimensions that do not fit together"""
    exit_code = 3


class ContractError(ResaError):
    """Input data violating an operation's precondition"""
    exit_code = 3


class FormatError(ResaError):
    """Malformed binary file; ``offset`` is the byte where decoding failed"""
    exit_code = 3

    def __init__(self, message: str, offset: int, context: Optional[Dict[str, Any]] = None):
        context = dict(context or {})
        context["offset"] = offset
        super().__init__(f"{message} (byte offset {offset})", context)
        self.offset = offset


class NumericFault(ResaError):
    """NaN/Inf reached in activations, losses or gradients"""
    exit_code = 4


class AcceptanceError(ResaError):
    """An audit or acceptance check failed"""
    exit_code = 5


class InternalError(ResaError):
    """Broken internal invariant, e.g. a cyclic tape"""
    exit_code = 1
