"""Exception hierarchy for the cardiofat pipeline.

Every error carries a ``category`` used by the CLI to pick its exit code:
``validation`` (2), ``recognition-failed`` (3), ``io`` (4), ``format`` (5).
"""


class CardioFatError(Exception):
    """Base class for all pipeline errors."""

    category = "validation"


# -- validation (exit code 2) ------------------------------------------------

class ValidationError(CardioFatError):
    category = "validation"


class DimensionMismatch(ValidationError):
    pass


class DegenerateDimensions(ValidationError):
    pass


class EmptyPatchSet(ValidationError):
    pass


class SearchRegionTooSmall(ValidationError):
    pass


class EvenWindowSize(ValidationError):
    pass


class EmptySlice(ValidationError):
    pass


class DegenerateWindow(ValidationError):
    pass


class ZeroMass(ValidationError):
    pass


class AlignmentMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class RegistrationMismatch(ValidationError):
    pass


class DatasetTooSmall(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class UnknownClass(ValidationError):
    pass


# -- recognition (exit code 3) -----------------------------------------------

class RecognitionFailed(CardioFatError):
    category = "recognition-failed"


# -- i/o (exit code 4) --------------------------------------------------------

class IoError(CardioFatError):
    category = "io"


class MissingMetadata(IoError):
    pass


class CorruptImage(IoError):
    pass


# -- file formats (exit code 5) ------------------------------------------------

class FormatError(CardioFatError):
    category = "format"


class MalformedArff(FormatError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class VersionMismatch(FormatError):
    pass


class CorruptModel(FormatError):
    pass
