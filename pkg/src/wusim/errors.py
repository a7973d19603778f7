"""Exception types raised by the wusim package."""


class WusimError(Exception):
    """Base class for package-specific errors."""


class InvalidParameterError(WusimError, ValueError):
    """A numeric parameter is outside its valid domain."""


class NonIntegrableInfluenceError(WusimError, ValueError):
    """The influence function does not decay fast enough to integrate."""


class DegenerateChainError(WusimError, ValueError):
    """The semi-Markov chain has zero total sojourn weight."""


class DivergentSeriesError(WusimError, ValueError):
    """A geometric series in an analytic expression diverges (p_md >= 1)."""


class NoFeasibleSleepError(WusimError, ValueError):
    """The delay budget cannot be met by any positive sleep time."""


class InvalidDatasetError(WusimError, ValueError):
    """Not enough samples to build the requested training split."""


class FitQualityError(WusimError, ValueError):
    """The fit-quality metric is undefined for these residuals."""


class ConfigError(WusimError, ValueError):
    """A configuration file could not be parsed or validated."""
