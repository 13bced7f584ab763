"""Exception types shared across the package."""


class PyramidSslError(Exception):
    """Base class for package-specific errors."""


class ConfigError(PyramidSslError):
    """Invalid, inconsistent, or unknown configuration."""


class ShapeError(PyramidSslError):
    """Array or tensor shape does not match the contract of an operation."""


class SamplingExhausted(PyramidSslError):
    """Rejection sampling failed to find an admissible draw within budget."""


class DegenerateVector(PyramidSslError):
    """A vector with (near-)zero norm reached a cosine computation."""


class FormatError(PyramidSslError):
    """A serialized container is malformed or has an unsupported version."""


class UndefinedMetric(PyramidSslError):
    """A metric is undefined for the given inputs (e.g. single-valued labels)."""


class NonFiniteLossError(PyramidSslError):
    """Training produced a NaN or infinite loss."""
