"""Exception hierarchy shared by every texiris module."""


class IrisError(Exception):
    """Base class for all errors raised by texiris."""


class DimensionError(IrisError, ValueError):
    pass


class ConfigurationError(IrisError, ValueError):
    pass


class ContractError(IrisError, ValueError):
    pass


class StateError(IrisError, RuntimeError):
    pass


class NumericalError(IrisError, FloatingPointError):
    pass


class DegenerateBatchError(IrisError, ValueError):
    pass


class DegenerateSignatureError(IrisError, ValueError):
    pass


class CapabilityError(IrisError, TypeError):
    pass


class ProtocolError(IrisError, ValueError):
    pass


class InputError(IrisError, ValueError):
    pass


class TrainingError(IrisError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(IrisError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ShapeMismatchError(StateError):
    def __init__(self, name, expected, found):
        super().__init__(
            f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}"
        )
        self.name = name
