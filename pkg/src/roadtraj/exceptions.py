"""Exception hierarchy shared by all roadtraj modules."""


class RoadTrajError(Exception):
    """Base class for every error raised by roadtraj."""


class InvalidCoordinateError(RoadTrajError, ValueError):
    pass


class NetworkParseError(RoadTrajError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ReferentialIntegrityError(RoadTrajError, ValueError):
    pass


class MissingSegmentError(RoadTrajError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing segment"


class InvalidSizeError(RoadTrajError, ValueError):
    pass


class ShapeError(RoadTrajError, ValueError):
    pass


class EmptyInputError(RoadTrajError, ValueError):
    pass


class IsolatedNodeError(RoadTrajError, ValueError):
    pass


class NoCandidateError(RoadTrajError, ValueError):
    pass


class NumericError(RoadTrajError, ArithmeticError):
    pass


class DeadEndError(RoadTrajError):
    pass


class InfeasibleCandidateError(RoadTrajError, ValueError):
    pass


class SearchBudgetError(RoadTrajError):
    def __init__(self, message, expansions=0):
        self.expansions = expansions
        super().__init__(message)


class UnreachableError(RoadTrajError):
    def __init__(self, message, expansions=0):
        self.expansions = expansions
        super().__init__(message)


class MappingError(RoadTrajError):
    pass


class TwoStageError(RoadTrajError):
    def __init__(self, message, leg=None, expansions=0):
        self.leg = leg
        self.expansions = expansions
        super().__init__(message)


class EmptyCorpusError(RoadTrajError, ValueError):
    pass


class DiscontinuousTrajectoryError(RoadTrajError, ValueError):
    pass


class InvalidArgumentError(RoadTrajError, ValueError):
    pass


class InvalidDistributionError(RoadTrajError, ValueError):
    pass


class GenerationStarvationError(RoadTrajError):
    pass
