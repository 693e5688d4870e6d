"""Exception types shared across the package."""


class DrsmoothError(Exception):
    """Base class for all drsmooth errors."""


class ModelValidationError(DrsmoothError):
    """Raised when an operation requires a valid model but validation failed.

    Carries the list of human-readable violation messages.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("invalid model: " + "; ".join(self.issues))


class GeneralizedModelError(DrsmoothError):
    """Raised by solvers that only support an identity noise gain.

    Models with a non-identity (possibly tall) noise-gain matrix must go
    through the ADMM solver in :mod:`drsmooth.admm`.
    """


class SingularityError(DrsmoothError):
    """Numerical singularity encountered at a specific time step."""

    def __init__(self, step, what):
        self.step = step
        super().__init__(f"{what} at step {step}")


class SelectionError(DrsmoothError):
    """No valid grid point available for regularization selection."""


class RansacError(DrsmoothError):
    """RANSAC failed to produce an observable consensus system."""


class ConfigError(DrsmoothError):
    """Malformed configuration file or CLI parameters."""
