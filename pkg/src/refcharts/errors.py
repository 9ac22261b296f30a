"""Exception types shared across the package.

The CLI maps these onto process exit codes: contract violations exit with 1,
numerical failures with 2, backend and IO failures with 3.
"""


class RefchartError(Exception):
    """Base class for package-specific errors."""


class ContractError(RefchartError):
    """A caller violated a documented precondition or data contract."""


class DomainError(ContractError):
    """A value lies outside the mathematical domain of an operation."""


class NumericalError(RefchartError):
    """An iterative numerical procedure failed to produce a usable result.

    ``state`` may carry the best result seen before the failure so callers
    can inspect partial progress.
    """

    def __init__(self, message: str, *, state=None, index=None):
        super().__init__(message)
        self.state = state
        self.index = index


class BackendError(RefchartError):
    """A text-model backend (HTTP endpoint or fixture store) failed."""
