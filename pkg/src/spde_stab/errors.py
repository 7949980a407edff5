"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
blow-ups with 3 and unreliable fits (strict mode only) with 4.
"""


class SpdeStabError(Exception):
    """Base class for all package errors."""


class ConfigError(SpdeStabError, ValueError):
    """Invalid parameter or configuration value."""


class TruncationError(ConfigError):
    """The modal truncation M cannot represent the requested quantity."""


class SingularGramError(SpdeStabError, ArithmeticError):
    """Gram matrix numerically singular at working precision."""


class BlowUpError(SpdeStabError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, message, time=None, path_index=None, segment=None):
        super().__init__(message)
        self.time = time
        self.path_index = path_index
        self.segment = segment


class DegenerateFitError(SpdeStabError, ValueError):
    """Decay fit impossible (e.g. identically zero statistic)."""


class UnreliableFitWarning(UserWarning):
    """Emitted when a log-linear fit has r^2 below 0.9."""
