"""Exception hierarchy shared by all rwspace modules.

Every error raised on purpose by this package derives from RwspaceError so
callers (and the CLI) can distinguish our failures from genuine bugs. The CLI
maps the three operational subclasses to distinct exit codes.
"""


class RwspaceError(Exception):
    """Base class for all rwspace errors."""


class ConfigError(RwspaceError):
    """Invalid configuration: bad environment spec, malformed config file,
    unknown keys, or parameter combinations ruled out at construction time."""


class DomainError(RwspaceError):
    """An argument lies outside the mathematical domain of the operation
    (e.g. a velocity outside the open unit L1 ball)."""


class WindowBoundsError(RwspaceError):
    """Access to an environment cell or lattice site outside the realized
    window. Carries the offending (time, site) pair in the message."""


class ResourceLimitError(RwspaceError):
    """The exact computation requested would exceed a configured size cap.
    The message states the required size so the caller can decide."""


class NonConvergenceError(RwspaceError):
    """An iterative numeric routine failed to reach its tolerance. Carries
    the final residual in the message."""


class EstimateUndefinedError(RwspaceError):
    """A Monte Carlo estimator received zero effective samples (e.g. no
    paths hit the conditioning event)."""
