"""Exception hierarchy shared by the library and the experiment runners."""


class PwaError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code: int = 1


class ConfigError(PwaError):
    """Invalid configuration, preset or command-line override."""

    exit_code = 2


class DimensionError(PwaError, ValueError):
    """Array shapes that do not agree with the declared dimensions."""


class InsufficientDataError(PwaError, ValueError):
    """Not enough points for the requested fit or statistic."""


class LyapunovError(PwaError, ValueError):
    """Lyapunov matrix is not positive definite or a mode leaves its cone."""


class NumericalError(PwaError):
    """A NaN or infinity reached a report."""

    exit_code = 3
