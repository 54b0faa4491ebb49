"""matekit: scan orders, bidirectional SSD blocks, windowed attention,
the analytic cost model, and a toy flow-matching trainer."""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, NumericError

__all__ = ["ConfigError", "DomainError", "NumericError", "__version__"]
