"""Exception hierarchy for the neural decoding pipeline.

Every exception carries an ``error_type`` that the CLI reports as a machine-parsable
category (see ``utils.create_error_response``).
"""

from typing import Any, Dict, Optional


class MindDecoderError(Exception):
    """Base class for all expected pipeline failures."""

    error_type = "MindDecoderError"

    def __init__(self, message: str, additional_info: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.additional_info = additional_info or {}


class ConfigError(MindDecoderError):
    error_type = "ConfigError"


class ManifestError(MindDecoderError):
    error_type = "ManifestError"


class RoiCountError(ManifestError):
    error_type = "RoiCountMismatch"


class ArrayLengthError(ManifestError):
    error_type = "ArrayLengthMismatch"


class UnknownTokenError(MindDecoderError):
    error_type = "UnknownToken"


class NonFiniteValueError(MindDecoderError):
    error_type = "NonFiniteValue"


class ShapeMismatchError(MindDecoderError):
    error_type = "ShapeMismatch"


class CategoryMismatchError(MindDecoderError):
    error_type = "CategoryMismatch"


class InvalidArgumentError(MindDecoderError):
    error_type = "InvalidArgument"


class MissingArtifactError(MindDecoderError):
    error_type = "MissingArtifact"


class TrainingDivergedError(MindDecoderError):
    error_type = "TrainingDiverged"


class VocabularyMismatchError(MindDecoderError):
    error_type = "VocabularyMismatch"


class SampleIdError(MindDecoderError):
    error_type = "SampleIdMismatch"


class ExportError(MindDecoderError):
    error_type = "ExportFailed"
