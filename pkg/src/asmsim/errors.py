"""Exception types shared across the toolkit."""


class AsmsimError(Exception):
    """Base class for toolkit errors."""


class DataError(AsmsimError):
    """Malformed or inconsistent input data: datasets, vocabularies, checkpoints."""


class NumericError(AsmsimError):
    """Non-finite values encountered during training or optimization."""
