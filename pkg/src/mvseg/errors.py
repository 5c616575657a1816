"""Exception hierarchy shared by all modules."""


class MVSegError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(MVSegError, ValueError):
    pass


class InputError(MVSegError, ValueError):
    pass


class ShapeError(InputError):
    pass


class DegenerateGeometryError(MVSegError, ValueError):
    pass


class GenerationError(MVSegError, RuntimeError):
    pass


class StratificationError(MVSegError, ValueError):
    pass


class CorruptionError(MVSegError, IOError):
    pass


class NotFoundError(MVSegError, FileNotFoundError):
    pass


class CheckpointError(MVSegError, ValueError):
    pass


class VersionError(CheckpointError):
    pass


class TrainingError(MVSegError, RuntimeError):
    pass
