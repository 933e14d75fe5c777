"""Exception hierarchy shared by every protopart module."""


class ProtoPartError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class InvalidShapeError(ProtoPartError, ValueError):
    pass


class InvalidArgumentError(ProtoPartError, ValueError):
    pass


class InvalidConfigError(ProtoPartError, ValueError):
    pass


class InvalidDatasetError(ProtoPartError, ValueError):
    pass


class ParseError(ProtoPartError, ValueError):
    """Malformed binary or text input; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptCheckpointError(ProtoPartError):
    pass


class UnsupportedVersionError(ProtoPartError):
    pass


class TrainingDivergedError(ProtoPartError, ArithmeticError):
    def __init__(self, epoch, message=None):
        super().__init__(message or f"objective became non-finite at epoch {epoch}")
        self.epoch = epoch
