"""Exception hierarchy.

``DataError`` covers malformed inputs and files, ``NumericalError`` covers
failures of the numerical routines. The CLI maps them to exit codes 2 and 3.
"""


class MlwaveError(Exception):
    pass


class DataError(MlwaveError):
    pass


class NumericalError(MlwaveError):
    pass


class BadGridDimensions(DataError):
    pass


class InconsistentDimensions(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class UnsupportedMode(DataError, ValueError):
    pass


class CoefficientIndexError(DataError, IndexError):
    """Coefficient index outside ``[0, n)``."""


class IncompleteGrid(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class EmptyScan(DataError):
    pass


class IoFailure(DataError):
    pass


class FormatVersionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class SvdFailure(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    pass
