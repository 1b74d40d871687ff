"""Exception hierarchy shared by all mfglab modules."""


class MfgLabError(Exception):
    """Base class for every error raised by mfglab."""


class OutsideTube(MfgLabError):
    """A point lies outside the tube where the signed distance is C^2."""


class PerturbationTooLarge(MfgLabError):
    pass


class NotTangent(MfgLabError):
    pass


class NotBoundary(MfgLabError):
    pass


class NoConvergence(MfgLabError):
    pass


class BracketFailure(MfgLabError):
    pass


class Infeasible(MfgLabError):
    pass


class MaxIterations(MfgLabError):
    pass


class DimensionUnsupported(MfgLabError):
    pass


class DegenerateProbeSet(MfgLabError):
    pass


class NotInCone(MfgLabError):
    pass


class OutOfWindow(MfgLabError):
    pass


class OffGrid(MfgLabError):
    pass


class SizeLimit(MfgLabError):
    pass


class NotConverged(MfgLabError):
    """Fictitious play stopped before reaching the requested tolerance.

    The partial result is attached as ``result`` so callers can still
    inspect or export the trace.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NotOnSupport(MfgLabError):
    pass


class NoInteriorApproach(MfgLabError):
    pass


class BadTestFunction(MfgLabError):
    pass


class ConfigError(MfgLabError):
    """Run configuration failed validation; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
