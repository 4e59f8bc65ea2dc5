"""Exception taxonomy shared by every module.

The CLI maps these onto its exit codes: configuration/IO problems exit 2,
validation or check failures exit 1, numeric divergence exits 3.
"""


class MfhError(Exception):
    """Base class for all workbench errors."""


class ConfigError(MfhError):
    """Invalid configuration: bad sizes, unknown names, malformed files."""


class DimensionError(MfhError):
    """Array shape does not match the declared contract."""


class ContractError(MfhError):
    """An operation was called outside its precondition."""


class DataError(MfhError):
    """A data value is out of range or cannot be parsed."""


class SchemaError(MfhError):
    """A dataset file does not match its declared schema."""


class NumericError(MfhError):
    """Loss or activations became non-finite during training."""
