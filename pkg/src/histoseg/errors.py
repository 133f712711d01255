"""Exception taxonomy shared across the package.

Two top-level families: ContractError for violated input/data contracts
(bad shapes, malformed files, impossible configurations) and
NumericalError for runtime numerical failures (non-finite values,
divergence). The CLI maps these to distinct exit codes.
"""


class ContractError(ValueError):
    """An input, file, or configuration violates a documented contract."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class ConfigError(ContractError):
    """A run configuration is malformed or internally inconsistent."""


class BalanceInfeasibleError(ContractError):
    """Requested class balance cannot be met by resampling this corpus."""


class ImageFormatError(ContractError):
    """Image file is not an 8-bit PNG."""


class ImageChannelError(ContractError):
    """Image does not carry exactly three 8-bit color channels."""


class ImageTruncatedError(ContractError):
    """Image file ends before the pixel data is complete."""


class ModelFormatError(ContractError):
    """Base class for model-file parsing failures."""


class BadMagicError(ModelFormatError):
    """Model file does not start with the expected magic bytes."""


class BadVersionError(ModelFormatError):
    """Model file declares an unsupported format version."""


class ChecksumError(ModelFormatError):
    """Model file checksum does not match its payload."""


class TruncatedModelError(ModelFormatError):
    """Model file ends before the declared payload is complete."""
