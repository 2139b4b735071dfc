"""Structured failures shared across the package."""


class ConecraftError(Exception):
    """Base class for all structured failures raised by this package."""


class DimensionLimit(ConecraftError):
    """Facet enumeration requested beyond the supported dimension."""


class OutsideCone(ConecraftError):
    """A point violates the cone constraints beyond tolerance."""


class StartOutside(ConecraftError):
    """An input path does not start inside the cone."""


class NoConvergence(ConecraftError):
    """The complementarity solver exceeded its sweep budget.

    Carries the worst residual seen so the caller can judge how badly
    the iteration stalled (likely non-completely-S reflection data).
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class GeometryError(ConecraftError):
    """Radius/containment preconditions of an experiment are violated."""


class IncompatibleGeometry(ConecraftError):
    """Two floor estimates were computed on different geometries."""


class PreconditionError(ConecraftError):
    """An operation precondition failed (start point outside domain, ...)."""


class ConeValidationError(ConecraftError):
    """Cone data failed validation; carries the full report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(ConecraftError):
    """Configuration file rejected; `line` is 1-based when known."""

    def __init__(self, message, line=None, kind="PARSE"):
        self.line = line
        self.kind = kind
        prefix = f"{kind}"
        if line is not None:
            prefix += f" (line {line})"
        super().__init__(f"{prefix}: {message}")
