"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, numerical failures exit 3, I/O failures exit 4, verification
failures exit 5.
"""


class RatchetError(Exception):
    """Base class for all package errors."""


class ConfigError(RatchetError):
    """Invalid configuration, parameters, or preconditions."""


class UnknownModelError(ConfigError):
    """Model name not found in the registry."""


class ParameterError(ConfigError):
    """Model or grid parameter outside its documented range."""


class InvalidModelError(RatchetError):
    """Coefficient evaluation produced a non-finite value."""


class AdmissibilityError(ConfigError):
    """A control path violates the nondecreasing (ratcheting) constraint."""


class CombinatorialBudgetError(ConfigError):
    """Control enumeration would exceed the path-count budget."""


class NumericalError(RatchetError):
    """Numerical failure during a solve."""


class CFLViolationError(NumericalError):
    """Explicit time step exceeds the monotonicity (CFL) bound."""


class LinearSolveError(NumericalError):
    """Tridiagonal solve failed to reach the required residual."""


class VerificationError(RatchetError):
    """An invariant suite failed during verification."""
