"""Exception hierarchy shared across the package."""


class TexgraphError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TexgraphError):
    """Operand shapes are incompatible with an operation."""


class ContractError(TexgraphError):
    """A documented precondition of an operation was violated."""


class ConfigError(TexgraphError):
    """Invalid or unknown configuration value."""


class DataError(TexgraphError):
    """Dataset-level problem (empty class directory, bad labels, ...)."""


class FileFormatError(DataError):
    """A file on disk could not be decoded; message names the file."""


class OracleError(TexgraphError):
    """The finite-difference oracle hit a non-finite evaluation."""


class CheckpointError(TexgraphError):
    """Base class for checkpoint serialization failures."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""


class VersionMismatchError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""
