"""Exception hierarchy shared by every module of the package."""


class QAMError(Exception):
    """Base class for all package errors."""


class NoFixedPoint(QAMError):
    pass


class NoIsland(QAMError):
    pass


class NotInIsland(QAMError):
    pass


class NotPeriodic(QAMError):
    pass


class QuadratureFailure(QAMError):
    pass


class EnergyOutOfRange(QAMError):
    pass


class InconsistentInputs(QAMError):
    pass


class NoCommensurateValue(QAMError):
    pass


class UnsupportedPlanck(QAMError):
    pass


class OutOfGrid(QAMError):
    pass


class GridOverflow(QAMError):
    pass


class NonPositiveProbability(QAMError):
    pass


class ConvergenceFailure(QAMError):
    def __init__(self, message, matrix_hash=None):
        super().__init__(message)
        self.matrix_hash = matrix_hash


class EmptyCandidates(QAMError):
    pass


class EmptyLadder(QAMError):
    pass


class DegenerateSpectrum(QAMError):
    pass


class DegenerateUnperturbed(QAMError):
    pass


class ActionOutsideIsland(QAMError):
    pass


class NoCommonPoints(QAMError):
    pass


class UnknownFigure(QAMError):
    pass


class ConfigError(QAMError):
    pass
