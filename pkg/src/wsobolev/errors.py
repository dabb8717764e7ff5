"""Exception and warning types shared across the package."""


class SpecSyntaxError(ValueError):
    """Malformed measure or suite configuration text."""


class ValidationError(ValueError):
    """A measure specification that parses but is not admissible."""


class UnsupportedStratumError(ValueError):
    """No decomposability-bundle entry is registered for a stratum class."""


class ResourceError(RuntimeError):
    """Requested discretization exceeds the configured size limits."""


class EvalError(ValueError):
    """A closed-form function produced non-finite values."""


class SolverError(RuntimeError):
    """A linear or eigen solve failed its residual check."""


class InconclusiveError(RuntimeError):
    """A check could not gather enough evidence to decide."""


class UnstableFibersWarning(UserWarning):
    """Too much mass sits in cells whose fiber dimension did not settle."""


class RankDeficiencyWarning(UserWarning):
    """Mass matrix rows were pruned before a least-squares solve."""
