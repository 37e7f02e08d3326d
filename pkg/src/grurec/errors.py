"""Exception hierarchy. CLI exit codes are derived from the base classes."""


class GrurecError(Exception):
    exit_code = 1


class ConfigError(GrurecError, ValueError):
    exit_code = 2


class BatchTooSmallError(ConfigError):
    pass


class AugmentationError(ConfigError):
    pass


class DataError(GrurecError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class EmptySequenceError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class ProtocolError(DataError):
    pass


class DivergenceError(GrurecError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ContractError(GrurecError, RuntimeError):
    exit_code = 1


class OracleError(ContractError):
    pass


class CheckpointError(GrurecError):
    exit_code = 3


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass
