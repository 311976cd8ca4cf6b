"""Shared exception types.

Everything derives from ValueError so that callers who don't care about the
distinction can catch one thing; tests and the CLI do care.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class InfeasibleError(ValueError):
    """A required feasible point does not exist or was not supplied."""


class SingularChannelError(ValueError):
    """Effective channel |f^H h| is (numerically) zero where a nonzero
    received-power target was requested."""


class OracleSizeError(ValueError):
    """Brute-force oracle asked to enumerate an instance that is too large."""
