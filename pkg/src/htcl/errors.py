"""Exception types shared across the package.

The CLI maps each family onto an exit code: configuration problems exit 2,
data/parse problems exit 3, numerical-contract violations exit 4.
"""


class HtclError(Exception):
    pass


class ConfigError(HtclError, ValueError):
    pass


class DataError(HtclError, ValueError):
    """Malformed or inconsistent input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractError(HtclError, ValueError):
    """A precondition of a numerical operation was violated."""


class InsufficientSamplesError(ContractError):
    pass


class DegeneratePatternError(ContractError):
    pass
