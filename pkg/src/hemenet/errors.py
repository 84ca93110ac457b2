"""Exception taxonomy shared across the package.

CLI exit codes map onto these: input errors exit 1, configuration
errors exit 2, numerical failures exit 3.
"""


class HemenetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HemenetError):
    """Operand shapes (or masks/channel counts) are incompatible."""


class NumericsError(HemenetError):
    """A forward op produced NaN/Inf, or a numerical check failed."""


class ParseError(HemenetError):
    """Malformed structure input (PDB text, TSV rows)."""


class SchemaError(HemenetError):
    """A JSON document violates the canonical record schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ConfigError(HemenetError):
    """Invalid run/model configuration."""


class DataError(HemenetError):
    """Inconsistent dataset inputs (labels, clusters, splits)."""
