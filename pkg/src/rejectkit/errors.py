"""Exception types raised across the toolkit."""


class RejectKitError(Exception):
    pass


class TrainingError(RejectKitError):
    """Optimisation diverged or failed to converge."""


class ParseError(RejectKitError, ValueError):
    """Malformed model, detector, bundle or dataset file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ParseError):
    pass


class NotDifferentiableError(RejectKitError):
    """Gradient requested from a detector that has no smooth decision function."""


class ConfigError(RejectKitError, ValueError):
    pass
