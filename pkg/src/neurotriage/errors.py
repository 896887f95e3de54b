"""Exception types shared across the pipeline."""


class NeurotriageError(Exception):
    """Base class for all errors raised by this package."""


# --- core ---
class UnknownFinding(NeurotriageError):
    pass


# --- volume IO / preprocessing ---
class UnsupportedFormat(NeurotriageError):
    pass


class CorruptHeader(NeurotriageError):
    pass


class EmptyHead(NeurotriageError):
    pass


# --- labeling ---
class TemplateError(NeurotriageError):
    pass


class NoJsonFound(NeurotriageError):
    pass


class EndpointUnreachable(NeurotriageError):
    pass


class AuthError(NeurotriageError):
    pass


class Timeout(NeurotriageError):
    pass


class LengthMismatch(NeurotriageError):
    pass


# --- networks / fusion ---
class ConfigError(NeurotriageError):
    pass


class InputTooSmall(NeurotriageError):
    pass


class DimMismatch(NeurotriageError):
    pass


class CheckpointMismatch(NeurotriageError):
    pass


# --- training ---
class EmptyInput(NeurotriageError):
    pass


class ShapeMismatch(NeurotriageError):
    pass


class Diverged(NeurotriageError):
    """Raised when the training loss becomes non-finite.

    Carries the checkpoint of the last finite state so the run can be inspected.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class VersionMismatch(NeurotriageError):
    pass


class CorruptFile(NeurotriageError):
    pass


# --- evaluation ---
class DegenerateLabels(NeurotriageError):
    pass


class IdMismatch(NeurotriageError):
    pass


class ParseError(NeurotriageError):
    pass


# --- phantom ---
class GeometryError(NeurotriageError):
    pass


class UnsupportedFinding(NeurotriageError):
    pass
