"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
process exit statuses without a lookup table.
"""


class VeditError(Exception):
    exit_code = 1


class UsageError(VeditError, ValueError):
    exit_code = 2


class InvalidConfig(UsageError):
    pass


class UnknownSweepAxis(UsageError):
    pass


class DataError(VeditError, ValueError):
    exit_code = 3


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyTargetSet(DataError):
    pass


class SequenceTooLong(DataError):
    pass


class PositionOutOfRange(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class InvariantViolation(DataError):
    pass


class CorruptManifest(DataError):
    pass


class OffsetOutOfRange(DataError):
    pass


class BadMagic(DataError):
    pass


class CrcMismatch(DataError):
    pass


class MissingTensor(DataError):
    pass


class TaskHeadMismatch(DataError):
    pass


class NumericalError(VeditError, ArithmeticError):
    exit_code = 4


class NonFiniteValue(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class InvalidSteps(InvalidConfig):
    pass


class SigmaOutOfRange(VeditError, ValueError):
    exit_code = 4


class NonDecreasingSigma(VeditError, ValueError):
    exit_code = 4


class OddHeadDim(InvalidConfig):
    pass
