class ParPianoError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(ParPianoError, ValueError):
    pass


class ShapeError(ParPianoError, ValueError):
    pass


class CheckpointError(ParPianoError):
    pass


class StateError(ParPianoError, RuntimeError):
    pass


class DataError(ParPianoError):
    pass


class TrainingDivergedError(ParPianoError, RuntimeError):
    def __init__(self, message: str, dump_path: str = ""):
        super().__init__(message)
        self.dump_path = dump_path
