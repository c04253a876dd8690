"""Exception hierarchy shared by every module."""


class KeyReIdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KeyReIdError):
    pass


class NonFiniteError(KeyReIdError):
    pass


class NonDeterministicError(KeyReIdError):
    pass


class ManifestError(KeyReIdError):
    """Malformed or inconsistent dataset on disk."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class SynthError(KeyReIdError):
    pass


class BatchError(KeyReIdError):
    """A batch cannot serve the requested loss or sampler."""


class EvaluationError(KeyReIdError):
    pass


class GalleryError(KeyReIdError):
    pass


class CheckpointError(KeyReIdError):
    pass


class ConfigError(KeyReIdError):
    def __init__(self, message, field=None):
        self.field = field
        prefix = f"{field}: " if field else ""
        super().__init__(f"{prefix}{message}")


class TrainingAbort(KeyReIdError):
    """Raised when a step produces a non-finite loss; the state is left untouched."""


class UnknownCameraError(KeyReIdError):
    pass
