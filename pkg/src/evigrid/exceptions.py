"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a config file or parameter set is invalid."""


class GroundTruthUnavailableError(RuntimeError):
    """Raised when an operation needs simulator ground truth that is absent."""


class DegenerateFitError(RuntimeError):
    """Raised when a regression problem has no usable signal (single label class,
    zero events)."""


class CvDegenerateError(RuntimeError):
    """Raised when a cross-validation fold is missing a label class."""


class DiagnosticsError(RuntimeError):
    """Raised when a diagnostic quantity is requested on degenerate input."""


class CalibrationUnavailableError(RuntimeError):
    """Raised when a systematic-error model cannot be fitted (too few controls).

    Callers are expected to catch this and keep nominal intervals, marking the
    affected estimates as uncalibrated.
    """
