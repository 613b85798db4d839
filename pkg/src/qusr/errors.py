"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class QUSRError(Exception):
    exit_code = 1


class ConfigError(QUSRError, ValueError):
    exit_code = 3


class DataError(QUSRError):
    exit_code = 4


class ShapeError(QUSRError, ValueError):
    exit_code = 4


class ImageIOError(QUSRError, OSError):
    exit_code = 5


class ImageFormatError(QUSRError, ValueError):
    exit_code = 5


class RemoteError(QUSRError):
    exit_code = 6


class ProtocolError(RemoteError):
    pass


class TrainingError(QUSRError, RuntimeError):
    exit_code = 7


class CheckpointError(QUSRError):
    exit_code = 8
