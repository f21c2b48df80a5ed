from mcaer.constants import ExitCode


class McaerError(Exception):
    exit_code = ExitCode.USAGE


class ConfigError(McaerError):
    pass


class ValidationError(McaerError):
    pass


class DimensionError(ValidationError):
    pass


class StateError(McaerError):
    pass


class ContractError(McaerError):
    pass


class DetectorUnavailable(McaerError):
    exit_code = ExitCode.IO


class ParseError(McaerError):
    exit_code = ExitCode.IO

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ''
        if source is not None:
            where += f'{source}'
        if line is not None:
            where += f':{line}'
        super().__init__(f'{where}: {message}' if where else message)


class DatasetError(McaerError):
    exit_code = ExitCode.IO


class CheckpointError(McaerError):
    exit_code = ExitCode.IO


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIndexError(CheckpointError):
    pass


class CacheError(McaerError):
    exit_code = ExitCode.CACHE_STRICT


class TrainingAborted(McaerError):
    exit_code = ExitCode.TRAIN_ABORT

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f'non-finite loss {loss} at epoch={epoch} batch={batch}')


class MissingCueError(McaerError):
    exit_code = ExitCode.MISSING_CUE


class NoFaceError(MissingCueError):
    pass


class SelfTestFailed(McaerError):
    pass
