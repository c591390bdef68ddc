"""Exception hierarchy.

The CLI maps ``ConfigError`` to exit code 2 and every other ``DataError`` to 4.
"""


class MagRError(Exception):
    pass


class ConfigError(MagRError, ValueError):
    """Invalid hyperparameter or argument."""


class DataError(MagRError):
    """Input data violates a precondition (shape, PSD-ness, file schema)."""


class CapacityError(DataError):
    pass


class PipelineError(DataError):
    def __init__(self, layer: str, message: str):
        super().__init__(f"layer {layer!r}: {message}")
        self.layer = layer


class TensorFormatError(DataError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimsMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass
