"""Exception hierarchy shared by all modules."""


class VVCError(Exception):
    """Base class for domain errors (mapped to CLI exit code 1)."""


class FeederParseError(VVCError):
    pass


class TopologyError(VVCError):
    pass


class UnitError(VVCError):
    pass


class InjectionError(VVCError):
    """Injection vector has the wrong length, non-finite or implausible entries."""


class DimensionError(VVCError):
    pass


class JacobianError(VVCError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ScenarioError(VVCError):
    pass


class DesignError(VVCError):
    pass


class ModelMismatchError(VVCError):
    """A model or design file was built for a different feeder."""
