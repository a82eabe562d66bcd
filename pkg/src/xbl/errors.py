"""Exception hierarchy shared across the package.

Grouping rule: anything that should abort a CLI run with "bad configuration"
derives from ConfigError, anything meaning "bad or missing data on disk or in
memory" derives from DatasetError.  The CLI maps these two families onto
distinct exit codes; everything else is a plain bug and propagates.
"""


class XBLError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(XBLError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(XBLError):
    """An operation produced non-finite values or was fed an invalid domain."""


class GraphError(XBLError):
    """A tensor or node was used with a graph it does not belong to."""


class ContractError(XBLError):
    """A documented precondition of an API call was violated."""


class ConfigError(XBLError):
    """Invalid, unknown, or unparseable run configuration."""


class DatasetError(XBLError):
    """Dataset missing, malformed, or inconsistent."""


class GenerationError(DatasetError):
    """Synthetic data generation produced an invalid sample."""


class ParseError(DatasetError):
    """A file on disk could not be decoded."""


class SelectionError(XBLError):
    """Exemplar selection could not satisfy the requested policy."""
