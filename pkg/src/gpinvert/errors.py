"""Exception types shared across the package.

Input validation failures raise plain ``ValueError`` and unsupported
requests raise ``NotImplementedError``; only failures of the numerics
themselves get a dedicated class so callers can tell them apart.
"""


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot produce a trustworthy result.

    Examples: a Gram matrix that stays indefinite after the full jitter
    ladder, or a sampler whose proposals are overwhelmingly non-finite.
    """


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""
