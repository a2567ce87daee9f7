"""Exception hierarchy shared by the library and the CLI.

Library code raises these; only the CLI turns them into exit codes.
"""
from __future__ import annotations


class ZseccError(Exception):
    """Base class for every error raised by zsecc."""


class ConfigurationError(ZseccError, ValueError):
    pass


class ArgumentError(ZseccError, ValueError):
    pass


class ShapeError(ZseccError, ValueError):
    pass


class ConstraintViolation(ZseccError, ValueError):
    """A weight outside [-64, 63] sits at a non-eighth block position."""

    def __init__(self, index: int, layer: str | None = None, value: int | None = None):
        self.index = index
        self.layer = layer
        self.value = value
        where = f"index={index}"
        if layer is not None:
            where += f" layer={layer}"
        if value is not None:
            where += f" value={value}"
        super().__init__(f"ConstraintViolation({where}): model is not WOT-regularized")


class QuantizationOverflow(ZseccError, ValueError):
    pass


class IdxFormatError(ZseccError):
    pass


class ModelFileError(ZseccError):
    pass


class CorruptionError(ModelFileError):
    pass


class ChecksumError(CorruptionError):
    pass


class VersionError(ModelFileError):
    pass


class OutputError(ZseccError):
    """A model file, report or dataset could not be written."""
