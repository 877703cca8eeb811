"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ContrastADError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ContrastADError):
    """Invalid or incompatible configuration (bad params, mismatched weights)."""


class DataError(ContrastADError):
    """Input data unusable (missing files, empty foreground, leaky splits)."""


class NumericalError(ContrastADError):
    """Numerical failure during optimization or scoring (NaN/Inf)."""


class ForegroundNotFound(DataError):
    """No foreground found: image is uniformly below the threshold."""


class DefectVanished(DataError):
    """Defect mask became empty at feature-grid resolution; skip the sample."""


class FingerprintMismatch(ConfigurationError):
    """Memory bank was built with a different extractor weight set."""
