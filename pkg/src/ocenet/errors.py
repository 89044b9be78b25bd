"""Error taxonomy shared across the package.

Every failure raised on purpose falls into one of five buckets so that
callers (and the command line front end) can map problems to a stable
exit code instead of pattern matching message strings.
"""


class OceError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(OceError):
    """Invalid or contradictory configuration values."""


class DimensionError(OceError):
    """Array rank or extent mismatch between connected pieces."""


class ContractError(OceError):
    """A caller violated a documented precondition."""


class NumericError(OceError):
    """Non-finite values or a numerically impossible request."""


class IoError(OceError):
    """Missing, malformed or unwritable files and directories."""
