"""Exception hierarchy shared across the package."""


class RoadposeError(Exception):
    pass


class NonPositiveDepth(RoadposeError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class DegenerateConfiguration(RoadposeError):
    pass


class NearSingularDenominator(RoadposeError):
    pass


class NumericalFailure(RoadposeError):
    pass


class InvalidProblem(RoadposeError):
    pass


class InsufficientParallax(RoadposeError):
    pass


class DegenerateMotion(RoadposeError):
    pass


class InsufficientPoints(RoadposeError):
    pass


class NonPositiveMedian(RoadposeError):
    pass


class ResectionFailure(RoadposeError):
    pass


class RayParallelToPlane(RoadposeError):
    pass


class PlaneUnavailable(RoadposeError):
    pass


class IdMismatch(RoadposeError):
    pass


class InvalidSpec(RoadposeError):
    pass


class FormatError(RoadposeError):
    """Malformed input file. Carries the path and 1-based line when known."""

    def __init__(self, msg, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + msg)
        self.path = path
        self.line = line
