"""Exception types shared across the toolkit."""


class GraspSynthError(Exception):
    """Base class for all toolkit errors."""


class DegenerateGeometry(GraspSynthError):
    """Input geometry has no usable extent (zero hull volume, collinear points)."""


class ZeroMotion(GraspSynthError):
    """Target motion is identically zero, so a wrench direction is undefined."""


class SolverFailure(GraspSynthError):
    """Convex solver exhausted its iteration budget without meeting tolerance."""


class EmptySelection(GraspSynthError):
    """No selectable points remain after applying the region mask."""


class NoContact(GraspSynthError):
    """Direct-grasp approach never touched the object within the travel bound."""


class InvalidStart(GraspSynthError):
    """Planner start state is in collision."""


class InvalidGoal(GraspSynthError):
    """Planner goal state is in collision."""


class NoPathFound(GraspSynthError):
    """Planner exhausted its sampling budget without connecting the trees."""


class ConfigError(GraspSynthError):
    """Suite or tool configuration references missing or inconsistent assets."""


class ParseError(GraspSynthError):
    """An input file could not be parsed.

    Carries the offending line number when known so CLI diagnostics can
    point at it.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        super().__init__(prefix + message)
