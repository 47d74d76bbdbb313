"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not conform (bad axis, mismatched shapes)."""


class ContractError(ValueError):
    """An API precondition was violated (non-scalar loss, unnormalized rows)."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter value."""


class DataError(ValueError):
    """Invalid data content (label out of range, empty class, bad batch)."""


class FormatError(ValueError):
    """A serialized file is malformed; message carries the byte offset."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; message carries epoch/step diagnostics."""
