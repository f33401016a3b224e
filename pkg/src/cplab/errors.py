"""Exception types shared across the package."""


class CplabError(Exception):
    """Base class for all package errors."""


class ConstructionError(CplabError):
    """A kernel builder produced an invalid entry (e.g. a negative rate)."""


class CriticalityError(CplabError):
    """Row sums deviate from the critical normalization beyond tolerance."""


class EnvironmentRejectionError(CplabError):
    """A sampled random environment failed a quality guard (caller may reseed)."""


class NonConvergenceError(CplabError):
    """The stationary pair-correlation integral did not converge.

    Carries the recorded decay curve so the failure can be audited.
    """

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve if curve is not None else []


class IntegrationError(CplabError):
    """The ODE integrator could not reach the requested accuracy."""


class ConfigError(CplabError):
    """Invalid experiment configuration; ``path`` locates the offending key."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
